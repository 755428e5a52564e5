"""One harmonization iteration and the evaluator-driven loop.

An iteration inverts the current composite into its diffusion latent,
refines the condition-word embeddings on both regions, then walks the
latent back down with the foreground condition swapped for the fused
background embedding, frozen foreground cross-attention, self-attention
injection, and per-step null-text edge optimization. The decoded result
is composited back so background pixels never change.

The full run scores each iteration, keeps the best description, and
follows the Continue/Regenerate/Conclude rules: two strict score drops
in a row revert to the best iteration and request a fresh description;
a fresh description that fails to beat the reverted best concludes the
run with the best-scoring image as the final output.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .descriptor import (
    ConditionDescription,
    DescriptionProvider,
    generate_descriptions,
)
from .diffusion import DiffusionBackend, SamplerConfig, invert
from .diffusion.tokens import TAG_BACK_COND, TAG_FORE_COND, make_prompt
from .errors import (
    ConfigError,
    HarmoniaError,
    InputError,
    IterationFailed,
    MaskOverlapError,
)
from .evaluate import (
    CONCLUDE,
    CONTINUE,
    REGENERATE,
    Decision,
    DecisionConfig,
    Evaluator,
    StatsEvaluator,
    decide,
    select_initial,
)
from .imagecore import (
    CompositeCase,
    ForegroundMask,
    RasterImage,
    composite_back,
    resize_image,
    save_png,
)
from .luts import export_lut, fit_lut
from .preserve import PreserveConfig, make_self_attention_controller, optimize_null_text
from .refine import (
    RefineConfig,
    RefinedPromptState,
    downsample_mask,
    fused_background_embedding,
    refine_optimizing,
)

RUN_FILE = "run.json"
TIMING_FILE = "timing.json"
RUN_FORMAT_VERSION = "1"


def write_atomic(path: Path, text: str) -> None:
    """Write a file via a same-directory temp name and atomic rename, so
    a crash mid-write never leaves a torn file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)

STATUS_RUNNING = "running"
STATUS_AWAITING_HUMAN = "awaiting_human"
STATUS_CONCLUDED = "concluded"
STATUS_FAILED = "failed"


@dataclasses.dataclass
class HarmonizeConfig:
    """Knobs for a full run; nested configs own their own validation."""

    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    refine: RefineConfig = dataclasses.field(default_factory=RefineConfig)
    preserve: PreserveConfig = dataclasses.field(default_factory=PreserveConfig)
    decisions: DecisionConfig = dataclasses.field(default_factory=DecisionConfig)
    k_candidates: int = 3
    interactive: bool = False
    extract_luts: bool = True
    lut_lattice: int = 9
    snapshot_steps: Optional[tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be at least 1")
        if self.k_candidates > self.decisions.max_iterations:
            raise ConfigError("k_candidates cannot exceed max_iterations")
        if self.lut_lattice < 2:
            raise ConfigError("lut_lattice must be at least 2")

    def to_payload(self) -> dict:
        payload = dataclasses.asdict(self)
        if self.snapshot_steps is not None:
            payload["snapshot_steps"] = list(self.snapshot_steps)
        if self.preserve.self_attention_steps is not None:
            payload["preserve"]["self_attention_steps"] = sorted(
                self.preserve.self_attention_steps)
        return payload


@dataclasses.dataclass
class IterationResult:
    """Everything one iteration produced, for scoring, UI, and persistence."""

    index: int
    input_image: RasterImage
    output_image: RasterImage
    description: ConditionDescription
    refined_fore: RefinedPromptState
    refined_back: RefinedPromptState
    fusion_weights: list[float]
    edge_losses: list[dict]
    flagged_steps: list[int]
    attention_snapshots: dict[str, np.ndarray]
    duration: float


@dataclasses.dataclass
class SteeringDecision:
    """A human (or service) override of a proposed decision.

    On Regenerate, an attached description replaces the provider call,
    letting the UI steer the next iteration with edited text.
    """

    decision: Decision
    description: Optional[ConditionDescription] = None


DecisionSource = Callable[["HarmonizationRun", Decision], SteeringDecision]
EventCallback = Callable[[str, dict], None]


@dataclasses.dataclass
class RunProviders:
    """External collaborators of a run: descriptions, scores, decisions."""

    describer: DescriptionProvider
    evaluator: Optional[Evaluator] = None
    decision_source: Optional[DecisionSource] = None


@dataclasses.dataclass
class HarmonizationRun:
    case: CompositeCase
    config: HarmonizeConfig
    results: list[IterationResult] = dataclasses.field(default_factory=list)
    scores: list[float] = dataclasses.field(default_factory=list)
    decisions: list[dict] = dataclasses.field(default_factory=list)
    descriptions: list[ConditionDescription] = dataclasses.field(
        default_factory=list)
    status: str = STATUS_RUNNING
    best_index: int = 0
    regen_count: int = 0
    error: Optional[str] = None

    def final_image(self) -> RasterImage:
        """Best-scoring output, or the untouched composite before any
        iteration completed."""
        if not self.results:
            return self.case.image
        return self.results[self.best_index].output_image

    def to_payload(self) -> dict:
        """JSON-ready state. Contains no wall-clock values, so identical
        seeded runs serialize byte-identically; timings go to a sidecar."""
        return {
            "format_version": RUN_FORMAT_VERSION,
            "case_id": self.case.case_id,
            "config": self.config.to_payload(),
            "status": self.status,
            "best_index": self.best_index,
            "regen_count": self.regen_count,
            "error": self.error,
            "scores": self.scores,
            "decisions": self.decisions,
            "descriptions": [description_payload(d) for d in self.descriptions],
            "iterations": [_iteration_payload(r) for r in self.results],
        }


def description_payload(desc: ConditionDescription) -> dict:
    return {
        "object": list(desc.object_words),
        "foreground": list(desc.fore_condition),
        "background": list(desc.back_condition),
        "provider_id": desc.provider_id,
    }


def description_from_payload(payload: dict) -> ConditionDescription:
    return ConditionDescription(
        object_words=list(payload["object"]),
        fore_condition=list(payload["foreground"]),
        back_condition=list(payload["background"]),
        provider_id=str(payload.get("provider_id", "")),
    )


def _iteration_payload(result: IterationResult) -> dict:
    return {
        "index": result.index,
        "description": description_payload(result.description),
        "fusion_weights": [float(a) for a in result.fusion_weights],
        "edge_losses": result.edge_losses,
        "flagged_steps": result.flagged_steps,
        "attention_snapshots": sorted(result.attention_snapshots),
        "image": f"iter_{result.index}.png",
        "lut": f"lut_{result.index}.cube",
        "refine_loss_fore": result.refined_fore.loss_log,
        "refine_loss_back": result.refined_back.loss_log,
    }


def _snapshot_grid(steps: int,
                   requested: Optional[tuple[int, ...]]) -> list[int]:
    if requested is not None:
        bad = [k for k in requested if not 1 <= k <= steps]
        if bad:
            raise ConfigError(f"snapshot steps out of range 1..{steps}: {bad}")
        return sorted(set(requested))
    return sorted({1, (steps + 1) // 2, steps})


def _attention_snapshots(backend: DiffusionBackend, trajectory,
                         fore_positions: list[int],
                         steps: list[int]) -> dict[str, np.ndarray]:
    """Foreground-condition cross-attention as [0,1] grayscale frames."""
    if not backend.attention_layers:
        return {}
    layer = backend.attention_layers[0]
    frames: dict[str, np.ndarray] = {}
    for k in steps:
        try:
            record = trajectory.recorder.at(k, layer)
        except KeyError:
            continue
        if record.cross is None:
            continue
        side = int(round(record.cross.shape[0] ** 0.5))
        fore = record.cross[:, fore_positions].sum(dim=1)
        peak = float(fore.max())
        if peak > 0:
            fore = fore / peak
        frames[f"step_{k:02d}_fore"] = (
            fore.reshape(side, side).cpu().numpy().astype(np.float32))
    return frames


def harmonize_iteration(current_image: RasterImage,
                        case_mask: ForegroundMask,
                        description: ConditionDescription,
                        backend: DiffusionBackend,
                        cfg: HarmonizeConfig | None = None,
                        index: int = 0) -> IterationResult:
    """Run one invert/refine/edit/composite cycle on the current image.

    Raises:
        IterationFailed: any stage error, tagged with the stage name.
    """
    cfg = cfg or HarmonizeConfig()
    started = time.monotonic()
    stage = "tokens"
    try:
        fore_tokens = make_prompt(backend, description.object_words,
                                  description.fore_condition, TAG_FORE_COND)
        back_tokens = make_prompt(backend, description.object_words,
                                  description.back_condition, TAG_BACK_COND)

        stage = "invert"
        trajectory = invert(backend, current_image, fore_tokens, cfg.sampler)

        stage = "refine"
        attention_side = backend.capture_size or backend.latent_size
        fore_mask = downsample_mask(case_mask.values, attention_side)
        back_mask = 1.0 - fore_mask
        fore_state = refine_optimizing(backend, trajectory, fore_tokens,
                                       fore_mask, cfg.refine)
        back_state = refine_optimizing(backend, trajectory, back_tokens,
                                       back_mask, cfg.refine,
                                       learn_fusion=True)
        alphas = back_state.fusion_weights or [1.0]
        back_positions = back_tokens.positions(TAG_BACK_COND)

        stage = "edit"

        def tokens_for_step(k: int):
            back_rows = back_state.embedding_at(k)[back_positions]
            fused = fused_background_embedding(back_rows, alphas)
            refined_fore = fore_tokens.with_embeddings(
                fore_state.embedding_at(k))
            return refined_fore.replace_condition_embedding(fused)

        controller = make_self_attention_controller(
            trajectory, cfg.preserve,
            freeze_positions=fore_tokens.positions(TAG_FORE_COND))
        edit = optimize_null_text(
            backend, trajectory, tokens_for_step, current_image,
            cfg.preserve, guidance_scale=cfg.sampler.guidance_scale_edit,
            controller=controller)

        stage = "decode"
        edited = backend.decode_latent(edit.final_latent)
        if edited.size != current_image.size:
            edited = resize_image(edited, current_image.height,
                                  current_image.width)

        stage = "composite"
        output = composite_back(current_image, edited, case_mask)
        background = ~case_mask.values.astype(bool)
        if not np.array_equal(output.pixels[background],
                              current_image.pixels[background]):
            raise InputError("background pixels changed during composite")

        stage = "package"
        snapshots = _attention_snapshots(
            backend, trajectory, fore_tokens.positions(TAG_FORE_COND),
            _snapshot_grid(cfg.sampler.steps, cfg.snapshot_steps))
        return IterationResult(
            index=index,
            input_image=current_image,
            output_image=output,
            description=description,
            refined_fore=fore_state,
            refined_back=back_state,
            fusion_weights=[float(a) for a in alphas],
            edge_losses=edit.losses,
            flagged_steps=edit.flagged_steps,
            attention_snapshots=snapshots,
            duration=time.monotonic() - started,
        )
    except IterationFailed:
        raise
    except (HarmoniaError, RuntimeError) as exc:
        raise IterationFailed(stage, str(exc)) from exc


class _RunWriter:
    """Persists every intermediate into the run directory as it lands."""

    def __init__(self, out_dir: str | Path, cfg: HarmonizeConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.timings: list[dict] = []

    def iteration(self, result: IterationResult, mask: ForegroundMask) -> None:
        save_png(result.output_image, self.dir / f"iter_{result.index}.png")
        attn_dir = self.dir / f"attn_{result.index}"
        for name in sorted(result.attention_snapshots):
            frame = result.attention_snapshots[name]
            gray = np.repeat((np.clip(frame, 0.0, 1.0))[:, :, None], 3, axis=2)
            save_png(RasterImage(gray), attn_dir / f"{name}.png")
        if self.cfg.extract_luts:
            lut = fit_lut(result.input_image, result.output_image, mask,
                          lattice_size=self.cfg.lut_lattice)
            export_lut(lut, self.dir / f"lut_{result.index}.cube")
        self.timings.append({"index": result.index,
                             "seconds": result.duration})

    def finish(self, run: HarmonizationRun) -> None:
        payload = json.dumps(run.to_payload(), sort_keys=True, indent=2)
        write_atomic(self.dir / RUN_FILE, payload + "\n")
        timing = {"iterations": self.timings,
                  "total_seconds": sum(t["seconds"] for t in self.timings)}
        write_atomic(self.dir / TIMING_FILE,
                     json.dumps(timing, sort_keys=True, indent=2) + "\n")


def run(case: CompositeCase, providers: RunProviders,
        backend: DiffusionBackend, cfg: HarmonizeConfig | None = None,
        out_dir: str | Path | None = None,
        on_event: EventCallback | None = None) -> HarmonizationRun:
    """The full scoring loop over harmonization iterations.

    Generates k_candidates descriptions, runs one iteration per
    description starting fresh from the composite, fixes the
    best-scoring description, then keeps iterating under the decision
    rules until conclusion, failure, or the iteration cap. With
    cfg.interactive set, each proposed decision goes through
    providers.decision_source; without a source the run returns paused
    in awaiting_human status.
    """
    cfg = cfg or HarmonizeConfig()
    state = HarmonizationRun(case=case, config=cfg)
    writer = _RunWriter(out_dir, cfg) if out_dir is not None else None
    evaluator = providers.evaluator or StatsEvaluator(case.mask)

    def emit(event_kind: str, **payload) -> None:
        if on_event is not None:
            on_event(event_kind, payload)

    def run_one(image: RasterImage, desc: ConditionDescription) -> None:
        result = harmonize_iteration(image, case.mask, desc, backend, cfg,
                                     index=len(state.results))
        score = evaluator.score(result.output_image).value
        state.results.append(result)
        state.scores.append(score)
        if score > state.scores[state.best_index]:
            state.best_index = len(state.scores) - 1
        if writer is not None:
            writer.iteration(result, case.mask)
        emit("iteration_done", index=result.index,
             description=description_payload(desc),
             image=f"iter_{result.index}.png",
             flagged_steps=result.flagged_steps)
        emit("score", index=result.index, value=score)

    def log_decision(decision: Decision, source: str) -> None:
        state.decisions.append({
            "after_iteration": len(state.scores) - 1,
            "kind": decision.kind,
            "revert_to": decision.revert_to,
            "source": source,
        })

    try:
        descriptions = generate_descriptions(case, providers.describer,
                                             k=cfg.k_candidates)
        state.descriptions.extend(descriptions)
        for desc in descriptions:
            emit("description_generated", description=description_payload(desc))

        for desc in descriptions:
            run_one(case.image, desc)
        state.best_index = select_initial(state.scores)
        chosen = descriptions[state.best_index]

        success_floor: Optional[float] = None
        while True:
            proposal = decide(state.scores, state.best_index,
                              state.regen_count, cfg.decisions)
            source = "evaluator"
            override: Optional[ConditionDescription] = None
            if cfg.interactive:
                state.status = STATUS_AWAITING_HUMAN
                emit("awaiting_human", proposal={
                    "kind": proposal.kind, "revert_to": proposal.revert_to})
                if providers.decision_source is None:
                    log_decision(proposal, "proposal")
                    if writer is not None:
                        writer.finish(state)
                    return state
                steering = providers.decision_source(state, proposal)
                state.status = STATUS_RUNNING
                proposal = steering.decision
                override = steering.description
                source = "human"
            emit("decision_proposed", kind=proposal.kind,
                 revert_to=proposal.revert_to, source=source)
            log_decision(proposal, source)

            if proposal.kind == CONCLUDE:
                break
            if proposal.kind == REGENERATE:
                state.regen_count += 1
                revert_to = (proposal.revert_to if proposal.revert_to
                             is not None else state.best_index)
                if override is not None:
                    chosen = override
                else:
                    chosen = generate_descriptions(
                        case, providers.describer, k=1)[0]
                state.descriptions.append(chosen)
                emit("description_generated",
                     description=description_payload(chosen))
                current = state.results[revert_to].output_image
                success_floor = state.scores[revert_to]
            else:
                current = state.results[-1].output_image

            run_one(current, chosen)

            if success_floor is not None:
                if state.scores[-1] > success_floor:
                    success_floor = None
                else:
                    conclusion = Decision(CONCLUDE)
                    log_decision(conclusion, "regeneration_check")
                    emit("decision_proposed", kind=CONCLUDE, revert_to=None,
                         source="regeneration_check")
                    break

        state.status = STATUS_CONCLUDED
        emit("concluded", best_index=state.best_index,
             best_score=state.scores[state.best_index],
             image=f"iter_{state.best_index}.png")
    except HarmoniaError as exc:
        state.status = STATUS_FAILED
        state.error = f"{type(exc).__name__}: {exc}"
        emit("failed", error=state.error)

    if writer is not None:
        writer.finish(state)
    return state


def harmonize_multi(image: RasterImage, masks: list[ForegroundMask],
                    providers: RunProviders, backend: DiffusionBackend,
                    cfg: HarmonizeConfig | None = None,
                    out_dir: str | Path | None = None,
                    on_event: EventCallback | None = None
                    ) -> tuple[RasterImage, list[HarmonizationRun]]:
    """Harmonize several instances sequentially, each feeding the next.

    Raises:
        MaskOverlapError: any two masks share a pixel.
        InputError: no masks, or a mask size mismatch.
    """
    if not masks:
        raise InputError("harmonize_multi needs at least one mask")
    coverage = np.zeros(masks[0].size, dtype=np.int64)
    for mask in masks:
        if mask.size != masks[0].size:
            raise InputError("all masks must share the image size")
        coverage += mask.values
    if (coverage > 1).any():
        raise MaskOverlapError("instance masks overlap")

    current = image
    runs: list[HarmonizationRun] = []
    for i, mask in enumerate(masks):
        case = CompositeCase(image=current, mask=mask,
                             case_id=f"instance_{i}")
        sub_dir = Path(out_dir) / f"instance_{i}" if out_dir else None
        result = run(case, providers, backend, cfg, out_dir=sub_dir,
                     on_event=on_event)
        runs.append(result)
        if result.status != STATUS_CONCLUDED:
            break
        current = result.final_image()
    return current, runs
