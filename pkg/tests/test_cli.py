"""Command-line behavior: config precedence, exit codes, determinism,
batch summaries, evaluator training, LUT tooling, and service launch."""

from __future__ import annotations

import json
import random
import signal
import socket
import subprocess
import sys
import time
import urllib.request
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from harmonia import cli
from harmonia.evaluate import TrainedEvaluator
from harmonia.fixtures import ShiftSpec, make_composite_case, make_scored_examples
from harmonia.imagecore import RasterImage, load_image, save_png
from harmonia.luts import import_lut

DESCRIPTION_LINES = [
    "object: subject | foreground: bright warm sunny | "
    "background: dim cool overcast",
    "object: subject | foreground: dark cold shadowed | "
    "background: bright warm lit",
    "object: subject | foreground: saturated vivid | "
    "background: muted soft hazy",
    "object: subject | foreground: pale washed flat | "
    "background: deep rich contrast",
]

FAST_FLAGS = ["--set", "sampler.steps=10", "--set", "k_candidates=1",
              "--set", "decisions.max_iterations=2"]


def write_case(directory: Path, name: str = "pond", seed: int = 7,
               shift: ShiftSpec = ShiftSpec(d_brightness=0.3)) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    case = make_composite_case(seed=seed, shift=shift)
    image_path = directory / f"{name}.png"
    mask_path = directory / f"{name}_mask.png"
    save_png(case.image, image_path)
    mask_rgb = np.repeat(case.mask.values[:, :, None].astype(np.float32),
                         3, axis=2)
    save_png(RasterImage(mask_rgb), mask_path)
    return image_path, mask_path


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory) -> dict:
    root = tmp_path_factory.mktemp("cli")
    image, mask = write_case(root)
    descriptions = root / "descriptions.txt"
    descriptions.write_text("\n".join(DESCRIPTION_LINES) + "\n")
    return {"root": root, "image": image, "mask": mask,
            "descriptions": descriptions}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def run_args(env: dict, out: Path, *extra: str) -> list[str]:
    return ["run", "--image", str(env["image"]), "--mask",
            str(env["mask"]), "--descriptions", str(env["descriptions"]),
            "--out", str(out), "--quiet", *FAST_FLAGS, *extra]


def test_run_concludes_and_reports(cli_env, runner, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(cli.main, run_args(cli_env, out))
    assert result.exit_code == 0, result.output
    assert "status: concluded" in result.output
    assert f"run dir: {out}" in result.output
    payload = json.loads((out / "run.json").read_text())
    assert payload["status"] == "concluded"
    best = payload["scores"][payload["best_index"]]
    assert f"final score: {best:.4f}" in result.output


def test_config_precedence_defaults_file_flags(tmp_path):
    """Property: every config field resolves from the highest layer
    that set it (defaults < file < --set flags)."""
    rng = random.Random(0)
    file_path = tmp_path / "cfg.json"
    fields = [
        (("sampler", "steps"), lambda r: r.randrange(4, 40)),
        (("sampler", "guidance_scale_edit"),
         lambda r: round(r.uniform(1.0, 5.0), 3)),
        (("refine", "epochs"), lambda r: r.randrange(1, 9)),
        (("decisions", "max_iterations"), lambda r: r.randrange(2, 9)),
        (("k_candidates",), lambda r: 1),
        (("lut_lattice",), lambda r: r.randrange(2, 9)),
        (("seed",), lambda r: r.randrange(0, 100)),
    ]
    for _ in range(25):
        file_payload: dict = {}
        flag_values: dict = {}
        flags: list[str] = []
        for key, gen in fields:
            layer = rng.choice(("default", "file", "flag", "both"))
            if layer in ("file", "both"):
                node = file_payload
                for part in key[:-1]:
                    node = node.setdefault(part, {})
                node[key[-1]] = gen(rng)
            if layer in ("flag", "both"):
                value = gen(rng)
                flag_values[key] = value
                flags.append(f"{'.'.join(key)}={json.dumps(value)}")
        file_path.write_text(json.dumps(file_payload))
        cfg = cli._resolve_run_config(str(file_path), None, tuple(flags),
                                      interactive=False, painterly=False)
        defaults = cli._resolve_run_config(None, None, (), False, False)
        for key, _ in fields:
            got = cfg
            expected_default = defaults
            for part in key:
                got = getattr(got, part)
                expected_default = getattr(expected_default, part)
            if key in flag_values:
                assert got == flag_values[key]
            else:
                node = file_payload
                for part in key[:-1]:
                    node = node.get(part, {})
                if key[-1] in node:
                    assert got == node[key[-1]]
                else:
                    assert got == expected_default


def test_seed_flag_fans_out_and_yields_to_explicit_set(tmp_path):
    file_path = tmp_path / "cfg.json"
    file_path.write_text(json.dumps(
        {"seed": 1, "sampler": {"seed": 2}, "refine": {"seed": 3}}))
    cfg = cli._resolve_run_config(str(file_path), 9, (), False, False)
    assert (cfg.seed, cfg.sampler.seed, cfg.refine.seed) == (9, 9, 9)
    cfg = cli._resolve_run_config(str(file_path), 9,
                                  ("sampler.seed=4",), False, False)
    assert (cfg.seed, cfg.sampler.seed, cfg.refine.seed) == (9, 4, 9)


def test_missing_mask_exits_2(cli_env, runner, tmp_path):
    args = ["run", "--image", str(cli_env["image"]), "--mask",
            str(tmp_path / "nope.png"), "--descriptions",
            str(cli_env["descriptions"])]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 2
    assert "does not exist" in result.output


def test_no_provider_exits_3(cli_env, runner, tmp_path):
    args = ["run", "--image", str(cli_env["image"]), "--mask",
            str(cli_env["mask"]), "--out", str(tmp_path / "r")]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 3
    assert "PROVIDER_UNAVAILABLE" in result.output


def test_unknown_backend_exits_4(cli_env, runner, tmp_path):
    result = runner.invoke(cli.main, run_args(
        cli_env, tmp_path / "r", "--backend", "warp"))
    assert result.exit_code == 4
    assert "BACKEND_UNAVAILABLE" in result.output


def test_bad_config_value_exits_2(cli_env, runner, tmp_path):
    result = runner.invoke(cli.main, run_args(
        cli_env, tmp_path / "r", "--set", "sampler.steps=oops"))
    assert result.exit_code == 2
    assert "BAD_CONFIG" in result.output
    result = runner.invoke(cli.main, run_args(
        cli_env, tmp_path / "r", "--set", "sampler.stepz=8"))
    assert result.exit_code == 2
    assert "unknown sampler config keys" in result.output


def test_failed_run_exits_1(cli_env, runner, tmp_path):
    out = tmp_path / "r"
    result = runner.invoke(cli.main, run_args(
        cli_env, out, "--set", "preserve.self_attention_steps=[99]"))
    assert result.exit_code == 1
    assert "status: failed" in result.output
    payload = json.loads((out / "run.json").read_text())
    assert payload["status"] == "failed"
    assert payload["error"]


def test_identical_seeded_runs_are_byte_identical(cli_env, runner,
                                                  tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        result = runner.invoke(cli.main,
                               run_args(cli_env, out, "--seed", "5"))
        assert result.exit_code == 0, result.output
    assert ((out_a / "run.json").read_bytes()
            == (out_b / "run.json").read_bytes())
    assert ((out_a / "iter_0.png").read_bytes()
            == (out_b / "iter_0.png").read_bytes())
    assert ((out_a / "lut_0.cube").read_bytes()
            == (out_b / "lut_0.cube").read_bytes())


def test_different_seed_changes_run(cli_env, runner, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(cli.main, run_args(
        cli_env, out_a, "--seed", "5")).exit_code == 0
    assert runner.invoke(cli.main, run_args(
        cli_env, out_b, "--seed", "6")).exit_code == 0
    assert ((out_a / "run.json").read_bytes()
            != (out_b / "run.json").read_bytes())


def test_painterly_restricts_attention_steps(cli_env, runner, tmp_path):
    out = tmp_path / "r"
    result = runner.invoke(cli.main,
                           run_args(cli_env, out, "--painterly"))
    assert result.exit_code == 0, result.output
    cfg = json.loads((out / "run.json").read_text())["config"]
    steps = cfg["preserve"]["self_attention_steps"]
    assert steps is not None and len(steps) > 0
    assert set(steps) < set(range(1, cfg["sampler"]["steps"] + 1))


def test_scripted_provider_skips_comment_lines(cli_env, runner, tmp_path):
    commented = tmp_path / "descriptions.txt"
    commented.write_text("# reply format header\n\n"
                         + DESCRIPTION_LINES[0] + "\n")
    args = ["run", "--image", str(cli_env["image"]), "--mask",
            str(cli_env["mask"]), "--descriptions", str(commented),
            "--out", str(tmp_path / "r"), "--quiet", *FAST_FLAGS]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 0, result.output


def test_interactive_stdin_steering(cli_env, runner, tmp_path):
    out = tmp_path / "r"
    args = run_args(cli_env, out, "--interactive", "--set",
                    "decisions.max_iterations=4")
    result = runner.invoke(cli.main, args, input="conclude\n")
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "run.json").read_text())
    assert payload["decisions"][-1]["kind"] == "conclude"
    assert payload["decisions"][-1]["source"] == "human"


def test_interactive_eof_concludes(cli_env, runner, tmp_path):
    out = tmp_path / "r"
    args = run_args(cli_env, out, "--interactive", "--set",
                    "decisions.max_iterations=4")
    result = runner.invoke(cli.main, args, input="")
    assert result.exit_code == 0, result.output
    payload = json.loads((out / "run.json").read_text())
    assert payload["status"] == "concluded"
    assert payload["decisions"][-1]["source"] == "human"


def test_batch_summary_and_per_case_isolation(cli_env, runner, tmp_path):
    cases = tmp_path / "cases"
    write_case(cases, "alpha", seed=3)
    write_case(cases, "beta", seed=4, shift=ShiftSpec(d_warmth=0.2))
    # A mask with no foreground pixels fails at load, isolated per case.
    write_case(cases, "broken", seed=5)
    save_png(RasterImage(np.zeros((16, 16, 3), dtype=np.float32)),
             cases / "broken_mask.png")
    out_root = tmp_path / "runs"
    args = ["batch", "--cases-dir", str(cases), "--out", str(out_root),
            "--descriptions", str(cli_env["descriptions"]), "--jobs", "2",
            "--seed", "1", *FAST_FLAGS]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 1
    assert "2/3 concluded" in result.output
    assert "DEGENERATE_MASK" in result.output
    for name in ("alpha", "beta"):
        payload = json.loads((out_root / name / "run.json").read_text())
        assert payload["status"] == "concluded"
        assert f"{name}" in result.output
    assert not (out_root / "broken" / "run.json").exists()


def test_batch_all_good_exits_0(cli_env, runner, tmp_path):
    cases = tmp_path / "cases"
    write_case(cases, "alpha", seed=3)
    args = ["batch", "--cases-dir", str(cases), "--out",
            str(tmp_path / "runs"), "--descriptions",
            str(cli_env["descriptions"]), *FAST_FLAGS]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 0, result.output
    assert "1/1 concluded" in result.output


def test_batch_empty_dir_exits_2(runner, tmp_path):
    result = runner.invoke(cli.main,
                           ["batch", "--cases-dir", str(tmp_path)])
    assert result.exit_code == 2
    assert "BAD_INPUT" in result.output


def test_train_evaluator_writes_artifact(runner, tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rows = ["# path<TAB>label"]
    for i, example in enumerate(make_scored_examples(count=40, seed=0)):
        name = f"ex{i:03d}.png"
        save_png(example.image, corpus / name)
        rows.append(f"{name}\t{example.label}")
    manifest = corpus / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    artifact = tmp_path / "eval.pt"
    args = ["train-evaluator", "--manifest", str(manifest), "--out",
            str(artifact), "--epochs", "10"]
    result = runner.invoke(cli.main, args)
    assert result.exit_code == 0, result.output
    assert "val_auc:" in result.output
    assert artifact.exists()
    evaluator = TrainedEvaluator.load(artifact)
    case = make_composite_case(seed=2)
    assert 0.0 <= evaluator.score(case.image).value <= 1.0


def test_run_with_trained_evaluator(cli_env, runner, tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rows = []
    for i, example in enumerate(make_scored_examples(count=40, seed=0)):
        name = f"ex{i:03d}.png"
        save_png(example.image, corpus / name)
        rows.append(f"{name}\t{example.label}")
    manifest = corpus / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    artifact = tmp_path / "eval.pt"
    assert runner.invoke(cli.main, [
        "train-evaluator", "--manifest", str(manifest), "--out",
        str(artifact), "--epochs", "5"]).exit_code == 0
    out = tmp_path / "r"
    result = runner.invoke(cli.main, run_args(
        cli_env, out, "--evaluator", str(artifact)))
    assert result.exit_code == 0, result.output


def test_luts_fit_apply_export_roundtrip(cli_env, runner, tmp_path):
    out = tmp_path / "r"
    assert runner.invoke(cli.main, run_args(cli_env, out)).exit_code == 0
    cube = tmp_path / "fit.cube"
    result = runner.invoke(cli.main, [
        "luts", "fit", "--from", str(cli_env["image"]), "--to",
        str(out / "iter_0.png"), "--mask", str(cli_env["mask"]),
        "--out", str(cube), "--lattice", "9"])
    assert result.exit_code == 0, result.output
    assert import_lut(cube).lattice_size == 9

    recolored = tmp_path / "applied.png"
    result = runner.invoke(cli.main, [
        "luts", "apply", "--image", str(cli_env["image"]), "--lut",
        str(cube), "--mask", str(cli_env["mask"]), "--out",
        str(recolored)])
    assert result.exit_code == 0, result.output
    applied = load_image(recolored)
    original = load_image(cli_env["image"])
    mask = load_image(cli_env["mask"]).pixels[:, :, 0] > 0.5
    assert np.array_equal(applied.pixels[~mask], original.pixels[~mask])
    assert not np.array_equal(applied.pixels[mask], original.pixels[mask])

    smaller = tmp_path / "fit5.cube"
    result = runner.invoke(cli.main, [
        "luts", "export", "--lut", str(cube), "--out", str(smaller),
        "--lattice", "5", "--title", "probe"])
    assert result.exit_code == 0, result.output
    text = smaller.read_text()
    assert 'TITLE "probe"' in text and "LUT_3D_SIZE 5" in text
    assert import_lut(smaller).lattice_size == 5


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def test_serve_is_reachable(cli_env, tmp_path):
    port = _free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "harmonia.cli", "serve", "--port",
         str(port), "--run-root", str(tmp_path / "runs"),
         "--descriptions", str(cli_env["descriptions"])],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
    try:
        deadline = time.time() + 30
        body = None
        while time.time() < deadline:
            try:
                with urllib.request.urlopen(
                        f"http://127.0.0.1:{port}/jobs", timeout=2) as rsp:
                    body = json.loads(rsp.read())
                    break
            except OSError:
                time.sleep(0.2)
        assert body == {"jobs": []}
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)
