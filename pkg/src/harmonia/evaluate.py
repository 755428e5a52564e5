"""Harmony scoring and the Continue/Regenerate/Conclude state machine.

A harmonization run produces a score history s_1, s_2, ...; after each
iteration the engine either continues editing, reverts to the best
result so far and requests fresh descriptions (when the score strictly
decreased twice in a row and the regeneration budget allows), or
concludes. Scores come from a pluggable evaluator: a scripted sequence
for tests, a color-statistics heuristic, or a small trained two-class
classifier whose probability of the "harmonious" class is the score.

The classifier trains on soft labels drawn from a 10-rank grid
(0.1 .. 1.0) with two-class cross-entropy against the soft target.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import pickle
import zipfile
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .errors import (
    ConfigError,
    EvaluatorUnavailable,
    InputError,
    LabelDegeneracyError,
)
from .imagecore import ForegroundMask, RasterImage, resize_image

LABEL_GRID = tuple(round(0.1 * r, 1) for r in range(1, 11))

CONTINUE = "continue"
REGENERATE = "regenerate"
CONCLUDE = "conclude"

ARTIFACT_VERSION = "1"


@dataclasses.dataclass
class HarmonyScore:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or not 0.0 <= self.value <= 1.0:
            raise InputError(f"score must be a finite value in [0,1], "
                             f"got {self.value}")


@dataclasses.dataclass
class Decision:
    kind: str
    revert_to: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (CONTINUE, REGENERATE, CONCLUDE):
            raise InputError(f"unknown decision kind {self.kind!r}")
        if self.kind == REGENERATE and self.revert_to is None:
            raise InputError("regenerate decisions must carry revert_to")


@dataclasses.dataclass
class ScoredExample:
    """A training image with its soft harmony label."""

    image: RasterImage
    label: float

    def __post_init__(self):
        if not any(abs(self.label - rank) < 1e-9 for rank in LABEL_GRID):
            raise InputError(
                f"label {self.label} is not on the 10-rank grid {LABEL_GRID}")


@dataclasses.dataclass
class DecisionConfig:
    max_iterations: int = 10
    max_regenerations: int = 2

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_regenerations < 0:
            raise ConfigError("iteration cap >= 1, regeneration cap >= 0")


def decide(score_history: Sequence[float], best_index: int,
           regen_count: int, cfg: DecisionConfig | None = None) -> Decision:
    """Next action after the latest score.

    Conclude when the iteration budget is spent. Otherwise, two strict
    decreases in a row trigger a regeneration (reverting to the best
    iteration) while the regeneration budget lasts, and a conclusion
    once it is spent. Anything else continues. Equal scores count as
    non-decreasing.
    """
    cfg = cfg or DecisionConfig()
    if not score_history:
        raise InputError("decide needs at least one score")
    if len(score_history) >= cfg.max_iterations:
        return Decision(CONCLUDE)
    if len(score_history) >= 3:
        s3, s2, s1 = (score_history[-3], score_history[-2], score_history[-1])
        if s1 < s2 < s3:
            if regen_count < cfg.max_regenerations:
                return Decision(REGENERATE, revert_to=best_index)
            return Decision(CONCLUDE)
    return Decision(CONTINUE)


def select_initial(scores: Sequence[float]) -> int:
    """Index of the best initial candidate; ties go to the lowest index."""
    if not scores:
        raise InputError("select_initial needs at least one score")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


# -- evaluators ---------------------------------------------------------------


class Evaluator(Protocol):
    def score(self, image: RasterImage) -> HarmonyScore: ...


class ScriptedEvaluator:
    """Replays a fixed score sequence; repeats the last entry when spent."""

    def __init__(self, scores: Sequence[float]):
        if not scores:
            raise InputError("scripted evaluator needs at least one score")
        self.scores = [float(s) for s in scores]
        self.cursor = 0

    def score(self, image: RasterImage) -> HarmonyScore:
        value = self.scores[min(self.cursor, len(self.scores) - 1)]
        self.cursor += 1
        return HarmonyScore(value)


class StatsEvaluator:
    """Scores by agreement of foreground and background channel means.

    A cheap deterministic stand-in for the trained classifier: matching
    color statistics score near 1, strong mismatches decay toward 0.
    """

    def __init__(self, mask: ForegroundMask, sharpness: float = 4.0):
        if sharpness <= 0:
            raise ConfigError("sharpness must be positive")
        self.mask = mask
        self.sharpness = sharpness

    def score(self, image: RasterImage) -> HarmonyScore:
        fg = self.mask.values.astype(bool)
        if image.pixels.shape[:2] != fg.shape:
            raise InputError("image size does not match the evaluator mask")
        fore = image.pixels[fg].mean(axis=0)
        back = image.pixels[~fg].mean(axis=0)
        distance = float(np.abs(fore - back).mean())
        return HarmonyScore(math.exp(-self.sharpness * distance))


class TinyHarmonyNet(torch.nn.Module):
    """Small convolutional two-class harmony classifier."""

    def __init__(self):
        super().__init__()
        self.features = torch.nn.Sequential(
            torch.nn.Conv2d(3, 8, 3, padding=1), torch.nn.ReLU(),
            torch.nn.MaxPool2d(2),
            torch.nn.Conv2d(8, 16, 3, padding=1), torch.nn.ReLU(),
            torch.nn.AdaptiveAvgPool2d(1))
        self.head = torch.nn.Linear(16, 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images).flatten(1))


_BACKBONES = {"tiny": TinyHarmonyNet}


@dataclasses.dataclass
class TrainConfig:
    backbone: str = "tiny"
    input_size: int = 16
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in _BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; "
                              f"available: {sorted(_BACKBONES)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if min(self.input_size, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ConfigError("training sizes and lr must be positive")

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class TrainedEvaluator:
    """Inference wrapper around a serialized classifier artifact."""

    def __init__(self, model: torch.nn.Module, input_size: int,
                 metadata: dict):
        self.model = model.eval()
        self.input_size = input_size
        self.metadata = metadata

    @classmethod
    def load(cls, path: str | Path) -> "TrainedEvaluator":
        path = Path(path)
        if not path.exists():
            raise EvaluatorUnavailable(f"no evaluator artifact at {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
            model = _BACKBONES[payload["backbone"]]()
            model.load_state_dict(payload["state_dict"])
        except (KeyError, RuntimeError, ValueError, EOFError,
                pickle.UnpicklingError, zipfile.BadZipFile) as exc:
            raise EvaluatorUnavailable(f"unreadable evaluator artifact: {exc}")
        return cls(model, int(payload["input_size"]), payload)

    def score(self, image: RasterImage) -> HarmonyScore:
        if image.size != (self.input_size, self.input_size):
            image = resize_image(image, self.input_size, self.input_size)
        tensor = torch.from_numpy(
            image.pixels.astype(np.float32)).permute(2, 0, 1)[None]
        with torch.no_grad():
            logits = self.model(tensor)[0]
            prob = torch.softmax(logits, dim=0)[1]
        return HarmonyScore(float(prob))


def soft_label_cross_entropy(logits: torch.Tensor,
                             labels: torch.Tensor) -> torch.Tensor:
    """Two-class cross-entropy against soft targets in [0,1]."""
    log_probs = torch.log_softmax(logits, dim=1)
    return -(labels * log_probs[:, 1]
             + (1.0 - labels) * log_probs[:, 0]).mean()


def ranking_auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Probability a positive outranks a negative (ties count half)."""
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    if not pos or not neg:
        raise LabelDegeneracyError("AUC needs both classes present")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def train_evaluator(examples: Sequence[ScoredExample],
                    cfg: TrainConfig | None = None,
                    artifact_path: str | Path | None = None
                    ) -> tuple[TrainedEvaluator, dict]:
    """Train the harmony classifier on soft-labeled examples.

    Returns the inference wrapper and its metrics; also serializes the
    artifact when a path is given. Raises LabelDegeneracyError unless
    both sides of 0.5 are represented.
    """
    cfg = cfg or TrainConfig()
    labels = [ex.label for ex in examples]
    if not any(v > 0.5 for v in labels) or not any(v < 0.5 for v in labels):
        raise LabelDegeneracyError(
            "training needs labels on both sides of 0.5")

    torch.manual_seed(cfg.seed)
    model = _BACKBONES[cfg.backbone]()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)

    def to_tensor(example: ScoredExample) -> torch.Tensor:
        image = example.image
        if image.size != (cfg.input_size, cfg.input_size):
            image = resize_image(image, cfg.input_size, cfg.input_size)
        return torch.from_numpy(
            image.pixels.astype(np.float32)).permute(2, 0, 1)

    data = torch.stack([to_tensor(ex) for ex in examples])
    targets = torch.tensor(labels, dtype=torch.float32)

    generator = torch.Generator().manual_seed(cfg.seed)
    order = torch.randperm(len(examples), generator=generator)
    n_val = max(1, int(round(cfg.val_fraction * len(examples))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise LabelDegeneracyError("not enough examples to split off "
                                   "a validation set")

    model.train()
    for _ in range(cfg.epochs):
        perm = train_idx[torch.randperm(len(train_idx), generator=generator)]
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = soft_label_cross_entropy(model(data[batch]), targets[batch])
            loss.backward()
            optimizer.step()

    model.eval()
    with torch.no_grad():
        val_probs = torch.softmax(model(data[val_idx]), dim=1)[:, 1].tolist()
    val_labels = [labels[i] > 0.5 for i in val_idx.tolist()]
    try:
        val_auc = ranking_auc(val_probs, val_labels)
    except LabelDegeneracyError:
        val_auc = float("nan")
    metrics = {"val_auc": val_auc, "n_train": len(train_idx),
               "n_val": int(n_val)}

    payload = {
        "version": ARTIFACT_VERSION,
        "backbone": cfg.backbone,
        "input_size": cfg.input_size,
        "config_hash": cfg.hash(),
        "state_dict": model.state_dict(),
        "metrics": metrics,
        "label_grid": list(LABEL_GRID),
    }
    if artifact_path is not None:
        torch.save(payload, Path(artifact_path))
    return TrainedEvaluator(model, cfg.input_size, payload), metrics


def load_manifest(path: str | Path) -> list[tuple[str, float]]:
    """Read a training manifest: one 'image_path<TAB>label' line each."""
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InputError(f"manifest line {lineno} is not "
                             f"'path<TAB>label': {raw!r}")
        entries.append((parts[0], float(parts[1])))
    if not entries:
        raise InputError(f"manifest {path} has no entries")
    return entries
