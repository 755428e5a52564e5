"""Command-line front door: one-shot harmonization runs, batch runs over
a directory of composite/mask pairs, evaluator training, LUT tooling, and
launching the HTTP job service.

Configuration precedence is defaults < config file < --seed < --set
flags; the fully resolved config is serialized into every run directory
so results stay reproducible from the artifacts alone.

Exit codes: 0 success, 1 a run finished in failed status, 2 input or
configuration problems, 3 description-provider problems, 4 diffusion
backend problems, 5 internal errors.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional

import click

from .config import (
    harmonize_config_from_payload,
    load_config_file,
    merge_layers,
)
from .descriptor import (
    DescriptionProvider,
    GeminiProvider,
    ScriptedProvider,
    parse_vlm_response,
)
from .diffusion import get_backend
from .errors import (
    BackendNumericsError,
    BackendUnavailable,
    DescriptionParseError,
    HarmoniaError,
    InputError,
    ProviderUnavailable,
)
from .evaluate import (
    CONCLUDE,
    CONTINUE,
    REGENERATE,
    Decision,
    ScoredExample,
    TrainConfig,
    TrainedEvaluator,
    load_manifest,
    train_evaluator,
)
from .harmonize import (
    STATUS_CONCLUDED,
    HarmonizeConfig,
    RunProviders,
    SteeringDecision,
    run as run_harmonization,
)
from .imagecore import load_case, load_image, load_mask, save_png
from .luts import apply_lut, export_lut, fit_lut, import_lut, resample_lut
from .preserve import painterly_steps

EXIT_RUN_FAILED = 1
EXIT_INPUT = 2
EXIT_PROVIDER = 3
EXIT_BACKEND = 4
EXIT_INTERNAL = 5


def _exit_code(exc: HarmoniaError) -> int:
    """Map the error taxonomy onto the documented exit codes."""
    if isinstance(exc, (ProviderUnavailable, DescriptionParseError)):
        return EXIT_PROVIDER
    if isinstance(exc, (BackendUnavailable, BackendNumericsError)):
        return EXIT_BACKEND
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if exc.code == "EVALUATOR_UNAVAILABLE":
        return EXIT_INPUT
    return EXIT_INTERNAL


def guarded(fn):
    """Convert domain errors into messages on stderr plus exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except HarmoniaError as exc:
            click.echo(f"error [{exc.code}]: {exc}", err=True)
            raise SystemExit(_exit_code(exc))

    return wrapper


def _parse_set_flags(pairs: tuple[str, ...]) -> dict[str, Any]:
    """Turn --set dotted.key=value flags into a nested payload.

    Values parse as JSON when possible (numbers, booleans, lists) and
    fall back to plain strings, so --set sampler.steps=12 and
    --set decisions.max_iterations=4 both do what they look like.
    """
    payload: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise InputError(f"--set needs KEY=VALUE, got {pair!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"--set key {key!r} nests under a scalar")
        node[parts[-1]] = value
    return payload


def _resolve_run_config(config_path: Optional[str], seed: Optional[int],
                        set_flags: tuple[str, ...], interactive: bool,
                        painterly: bool) -> HarmonizeConfig:
    layers = [load_config_file(config_path) if config_path else None]
    if seed is not None:
        layers.append({"seed": seed, "sampler": {"seed": seed},
                       "refine": {"seed": seed}})
    layers.append(_parse_set_flags(set_flags))
    cfg = harmonize_config_from_payload(merge_layers(*layers))
    if interactive:
        cfg = dataclasses.replace(cfg, interactive=True)
    if painterly:
        steps = painterly_steps(cfg.sampler.steps,
                                cfg.preserve.painterly_fraction)
        cfg = dataclasses.replace(
            cfg, preserve=dataclasses.replace(
                cfg.preserve, self_attention_steps=steps))
    return cfg


def _make_describer(provider: Optional[str], descriptions: Optional[str],
                    seed: int) -> DescriptionProvider:
    if provider == "gemini":
        return GeminiProvider()
    if descriptions:
        return ScriptedProvider(Path(descriptions), seed=seed)
    if provider == "scripted":
        raise InputError("the scripted provider needs --descriptions "
                         "with one response per line")
    raise ProviderUnavailable(
        "no description provider configured; pass --descriptions FILE "
        "or --provider gemini")


def _make_backend(name: str, weights: Optional[str]):
    options: dict[str, Any] = {}
    if weights and name != "toy":
        options["weights"] = weights
    return get_backend(name, **options)


def _pick_out_dir(out: Optional[str], root: str, case_id: str) -> Path:
    """Choose a run directory: --out verbatim, else the first free
    root/case_id[-N]."""
    if out:
        return Path(out)
    base = Path(root) / case_id
    candidate = base
    suffix = 2
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    return candidate


def _progress_printer(kind: str, payload: dict) -> None:
    if kind == "description_generated":
        desc = payload["description"]
        click.echo("  description: object={} fore={} back={}".format(
            " ".join(desc["object"]), " ".join(desc["foreground"]),
            " ".join(desc["background"])))
    elif kind == "score":
        click.echo(f"  iteration {payload['index']}: "
                   f"score {payload['value']:.4f}")
    elif kind == "decision_proposed":
        target = (f" (revert to {payload['revert_to']})"
                  if payload.get("revert_to") is not None else "")
        click.echo(f"  decision [{payload['source']}]: "
                   f"{payload['kind']}{target}")


def _stdin_decision_source(state, proposal) -> SteeringDecision:
    """Interactive steering over stdin; EOF or ctrl-C concludes."""
    target = (f" (revert to {proposal.revert_to})"
              if proposal.revert_to is not None else "")
    click.echo(f"proposed decision: {proposal.kind}{target}")
    try:
        kind = click.prompt(
            "decision", default=proposal.kind,
            type=click.Choice([CONTINUE, REGENERATE, CONCLUDE]))
        if kind != REGENERATE:
            return SteeringDecision(Decision(kind))
        default_revert = (proposal.revert_to
                          if proposal.revert_to is not None
                          else state.best_index)
        revert_to = click.prompt("revert to iteration", type=int,
                                 default=default_revert)
        raw = click.prompt(
            "edited description (object: ... | foreground: ... | "
            "background: ...; blank asks the provider)",
            default="", show_default=False)
    except (click.Abort, EOFError):
        click.echo("\nconcluding")
        return SteeringDecision(Decision(CONCLUDE))
    description = (parse_vlm_response(raw, provider_id="human")
                   if raw.strip() else None)
    return SteeringDecision(Decision(REGENERATE, revert_to=revert_to),
                            description=description)


@click.group()
def main() -> None:
    """Zero-shot image harmonization: runs, batches, evaluators, LUTs,
    and the steering service."""


@main.command("run")
@click.option("--image", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Composite image PNG.")
@click.option("--mask", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Binary foreground mask PNG.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False),
              help="JSON run config; flags override it.")
@click.option("--out", type=click.Path(file_okay=False),
              help="Run directory (default: runs/<case>).")
@click.option("--run-root", default="runs", show_default=True,
              help="Parent for auto-named run directories.")
@click.option("--interactive", is_flag=True,
              help="Pause at each decision and steer over stdin.")
@click.option("--painterly", is_flag=True,
              help="Restrict self-attention injection to the early "
                   "sampling steps for stylized backgrounds.")
@click.option("--backend", default="toy", show_default=True,
              help="Diffusion backend name.")
@click.option("--weights", type=click.Path(),
              help="Weights path or model id for non-toy backends.")
@click.option("--descriptions", type=click.Path(exists=True,
                                                dir_okay=False),
              help="Scripted provider response file (one per line).")
@click.option("--provider", type=click.Choice(["scripted", "gemini"]),
              help="Description provider kind.")
@click.option("--evaluator", type=click.Path(exists=True, dir_okay=False),
              help="Trained evaluator artifact; omitted uses image "
                   "statistics.")
@click.option("--seed", type=int, help="Seed for every stochastic piece.")
@click.option("--set", "set_flags", multiple=True, metavar="KEY=VALUE",
              help="Dotted config override, e.g. sampler.steps=12.")
@click.option("--quiet", is_flag=True, help="No per-iteration progress.")
@guarded
def run_cmd(image: str, mask: str, config_path: Optional[str],
            out: Optional[str], run_root: str, interactive: bool,
            painterly: bool, backend: str, weights: Optional[str],
            descriptions: Optional[str], provider: Optional[str],
            evaluator: Optional[str], seed: Optional[int],
            set_flags: tuple[str, ...], quiet: bool) -> None:
    """Harmonize one composite and write a run directory."""
    cfg = _resolve_run_config(config_path, seed, set_flags, interactive,
                              painterly)
    case = load_case(image, mask)
    providers = RunProviders(
        describer=_make_describer(provider, descriptions, cfg.seed),
        evaluator=TrainedEvaluator.load(evaluator) if evaluator else None,
        decision_source=_stdin_decision_source if interactive else None)
    out_dir = _pick_out_dir(out, run_root, case.case_id)
    on_event = None if quiet else _progress_printer
    state = run_harmonization(case, providers, _make_backend(backend,
                                                             weights),
                              cfg, out_dir=out_dir, on_event=on_event)
    final = state.scores[state.best_index] if state.scores else float("nan")
    click.echo(f"status: {state.status}")
    click.echo(f"final score: {final:.4f} (iteration {state.best_index})")
    click.echo(f"run dir: {out_dir}")
    if state.status != STATUS_CONCLUDED:
        if state.error:
            click.echo(f"error: {state.error}", err=True)
        raise SystemExit(EXIT_RUN_FAILED)


def _discover_cases(cases_dir: Path) -> list[tuple[str, Path, Path]]:
    """Pair <name>.png with <name>_mask.png under one directory."""
    cases = []
    for mask_path in sorted(cases_dir.glob("*_mask.png")):
        image_path = mask_path.with_name(
            mask_path.name[:-len("_mask.png")] + ".png")
        if image_path.exists():
            cases.append((image_path.stem, image_path, mask_path))
    if not cases:
        raise InputError(f"no <name>.png + <name>_mask.png pairs "
                         f"in {cases_dir}")
    return cases


@main.command("batch")
@click.option("--cases-dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of <name>.png + <name>_mask.png pairs.")
@click.option("--out", "out_root", default="runs", show_default=True,
              type=click.Path(file_okay=False),
              help="Parent directory for the per-case run dirs.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False))
@click.option("--jobs", default=1, show_default=True,
              help="Concurrent cases, each on its own backend.")
@click.option("--backend", default="toy", show_default=True)
@click.option("--weights", type=click.Path())
@click.option("--descriptions",
              type=click.Path(exists=True, dir_okay=False))
@click.option("--provider", type=click.Choice(["scripted", "gemini"]))
@click.option("--evaluator", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--set", "set_flags", multiple=True, metavar="KEY=VALUE")
@guarded
def batch_cmd(cases_dir: str, out_root: str, config_path: Optional[str],
              jobs: int, backend: str, weights: Optional[str],
              descriptions: Optional[str], provider: Optional[str],
              evaluator: Optional[str], seed: Optional[int],
              set_flags: tuple[str, ...]) -> None:
    """Harmonize every composite in a directory and print a summary.

    One case failing does not abort the rest; the exit code is nonzero
    unless every case concluded.
    """
    cfg = _resolve_run_config(config_path, seed, set_flags,
                              interactive=False, painterly=False)
    cases = _discover_cases(Path(cases_dir))
    if jobs < 1:
        raise InputError("--jobs must be at least 1")

    def run_case(entry: tuple[str, Path, Path]) -> dict:
        name, image_path, mask_path = entry
        started = time.perf_counter()
        row = {"case": name, "status": "failed", "iterations": 0,
               "score": float("nan")}
        try:
            case = load_case(image_path, mask_path)
            providers = RunProviders(
                describer=_make_describer(provider, descriptions,
                                          cfg.seed),
                evaluator=(TrainedEvaluator.load(evaluator)
                           if evaluator else None))
            state = run_harmonization(
                case, providers, _make_backend(backend, weights), cfg,
                out_dir=Path(out_root) / name)
            row["status"] = state.status
            row["iterations"] = len(state.scores)
            if state.scores:
                row["score"] = state.scores[state.best_index]
            if state.error:
                row["error"] = state.error
        except HarmoniaError as exc:
            row["error"] = f"{exc.code}: {exc}"
        row["seconds"] = time.perf_counter() - started
        return row

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        rows = list(pool.map(run_case, cases))

    width = max(4, max(len(r["case"]) for r in rows))
    click.echo(f"{'case':<{width}}  {'status':<10} {'iters':>5} "
               f"{'score':>7} {'seconds':>8}")
    for row in rows:
        click.echo(f"{row['case']:<{width}}  {row['status']:<10} "
                   f"{row['iterations']:>5} {row['score']:>7.4f} "
                   f"{row['seconds']:>8.2f}")
        if row.get("error"):
            click.echo(f"{'':<{width}}  error: {row['error']}")
    failed = sum(1 for r in rows if r["status"] != STATUS_CONCLUDED)
    click.echo(f"{len(rows) - failed}/{len(rows)} concluded")
    if failed:
        raise SystemExit(EXIT_RUN_FAILED)


@main.command("train-evaluator")
@click.option("--manifest", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Tab-separated image-path/label lines; relative "
                   "paths resolve against the manifest's directory.")
@click.option("--out", "artifact", default="evaluator.pt",
              show_default=True, type=click.Path(dir_okay=False),
              help="Where to save the trained artifact.")
@click.option("--backbone", default="tiny", show_default=True)
@click.option("--input-size", default=16, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--val-fraction", default=0.25, show_default=True)
@click.option("--seed", default=0, show_default=True)
@guarded
def train_evaluator_cmd(manifest: str, artifact: str, backbone: str,
                        input_size: int, epochs: int, batch_size: int,
                        lr: float, val_fraction: float, seed: int) -> None:
    """Train the harmony evaluator from a scored-image manifest."""
    manifest_path = Path(manifest)
    entries = load_manifest(manifest_path)
    examples = []
    for rel, label in entries:
        path = Path(rel)
        if not path.is_absolute():
            path = manifest_path.parent / path
        examples.append(ScoredExample(load_image(path), label))
    cfg = TrainConfig(backbone=backbone, input_size=input_size,
                      epochs=epochs, batch_size=batch_size, lr=lr,
                      val_fraction=val_fraction, seed=seed)
    _, metrics = train_evaluator(examples, cfg, artifact_path=artifact)
    click.echo(f"examples: {len(examples)}")
    for key in sorted(metrics):
        value = metrics[key]
        shown = f"{value:.4f}" if isinstance(value, float) else value
        click.echo(f"{key}: {shown}")
    click.echo(f"artifact: {artifact}")


@main.group("luts")
def luts_group() -> None:
    """Fit, apply, and re-export 3D color lookup tables."""


@luts_group.command("fit")
@click.option("--from", "from_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Source image (colors the LUT maps from).")
@click.option("--to", "to_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Target image (colors the LUT maps to).")
@click.option("--mask", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Region whose pixels drive the fit.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Output .cube path.")
@click.option("--lattice", default=17, show_default=True)
@click.option("--smoothness", default=1e-3, show_default=True)
@click.option("--region", default="global", show_default=True,
              help="Region label recorded in the .cube title.")
@guarded
def luts_fit_cmd(from_path: str, to_path: str, mask: str, out: str,
                 lattice: int, smoothness: float, region: str) -> None:
    """Fit a LUT that recolors one image's masked region into another's."""
    lut = fit_lut(load_image(from_path), load_image(to_path),
                  load_mask(mask), lattice_size=lattice,
                  smoothness=smoothness, region=region)
    export_lut(lut, out)
    click.echo(f"lut: {out} (lattice {lut.lattice_size}, "
               f"region {lut.region})")


@luts_group.command("apply")
@click.option("--image", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--lut", "lut_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", type=click.Path(exists=True, dir_okay=False),
              help="Restrict the recolor to this region.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def luts_apply_cmd(image: str, lut_path: str, mask: Optional[str],
                   out: str) -> None:
    """Apply a .cube LUT to an image, optionally within a mask."""
    lut = import_lut(lut_path)
    result = apply_lut(load_image(image), lut,
                       mask=load_mask(mask) if mask else None)
    save_png(result, out)
    click.echo(f"image: {out}")


@luts_group.command("export")
@click.option("--lut", "lut_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--lattice", type=int,
              help="Resample onto this lattice size before writing.")
@click.option("--title", default="harmonia", show_default=True)
@guarded
def luts_export_cmd(lut_path: str, out: str, lattice: Optional[int],
                    title: str) -> None:
    """Rewrite a .cube LUT, optionally resampled to a new lattice."""
    lut = import_lut(lut_path)
    if lattice is not None:
        lut = resample_lut(lut, lattice)
    export_lut(lut, out, title=title)
    click.echo(f"lut: {out} (lattice {lut.lattice_size})")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True,
              envvar="HARMONIA_HOST")
@click.option("--port", default=8787, show_default=True, type=int,
              envvar="HARMONIA_PORT")
@click.option("--run-root", default="runs", show_default=True,
              envvar="HARMONIA_RUN_ROOT")
@click.option("--backend", default="toy", show_default=True,
              envvar="HARMONIA_BACKEND")
@click.option("--weights", envvar="HARMONIA_WEIGHTS")
@click.option("--descriptions", envvar="HARMONIA_DESCRIPTIONS",
              type=click.Path(exists=True, dir_okay=False))
@click.option("--provider", envvar="HARMONIA_PROVIDER")
@click.option("--evaluator", envvar="HARMONIA_EVALUATOR",
              type=click.Path(exists=True, dir_okay=False))
@click.option("--max-sessions", default=2, show_default=True, type=int,
              envvar="HARMONIA_MAX_SESSIONS")
@guarded
def serve_cmd(host: str, port: int, run_root: str, backend: str,
              weights: Optional[str], descriptions: Optional[str],
              provider: Optional[str], evaluator: Optional[str],
              max_sessions: int) -> None:
    """Run the harmonization job service over HTTP."""
    import uvicorn

    from .service import JobService, ServiceConfig, create_app

    env = {"HARMONIA_RUN_ROOT": run_root, "HARMONIA_BACKEND": backend,
           "HARMONIA_MAX_SESSIONS": str(max_sessions)}
    if weights:
        env["HARMONIA_WEIGHTS"] = weights
    if descriptions:
        env["HARMONIA_DESCRIPTIONS"] = descriptions
    if provider:
        env["HARMONIA_PROVIDER"] = provider
    if evaluator:
        env["HARMONIA_EVALUATOR"] = evaluator
    service = JobService(ServiceConfig.from_env(env))
    app = create_app(service)
    click.echo(f"serving on http://{host}:{port} (runs in {run_root})")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
