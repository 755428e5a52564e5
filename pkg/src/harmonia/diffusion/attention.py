"""Attention capture and control.

Backends call the controller at every attention layer in a layer order
that is deterministic for that backend (the toy backend fires cross
first, then self, at its single layer; network backends follow module
execution order). A controller may return the maps unchanged
(observation), or return replacements; replacements only swap attention
weights, never value projections.
"""

from __future__ import annotations

import dataclasses

import torch


@dataclasses.dataclass
class AttentionRecord:
    """Captured maps for one (timestep, layer) pair.

    cross: (pixels, tokens), rows sum to 1.
    self_attn: (pixels, pixels), rows sum to 1.
    """

    timestep: int
    layer: str
    cross: torch.Tensor | None = None
    self_attn: torch.Tensor | None = None


class AttentionController:
    """Base controller: pure observation, returns maps unchanged."""

    def cross_attention(self, maps: torch.Tensor, timestep: int, layer: str,
                        tokens) -> torch.Tensor:
        return maps

    def self_attention(self, maps: torch.Tensor, timestep: int,
                       layer: str) -> torch.Tensor:
        return maps


class RecordingController(AttentionController):
    """Stores every map it sees; replacement-free."""

    def __init__(self):
        self.records: list[AttentionRecord] = []

    def cross_attention(self, maps, timestep, layer, tokens):
        self._record(timestep, layer).cross = maps.detach().clone()
        return maps

    def self_attention(self, maps, timestep, layer):
        self._record(timestep, layer).self_attn = maps.detach().clone()
        return maps

    def _record(self, timestep: int, layer: str) -> AttentionRecord:
        for rec in reversed(self.records):
            if rec.timestep == timestep and rec.layer == layer:
                return rec
        rec = AttentionRecord(timestep=timestep, layer=layer)
        self.records.append(rec)
        return rec

    def at(self, timestep: int, layer: str | None = None) -> AttentionRecord:
        for rec in self.records:
            if rec.timestep == timestep and (layer is None or rec.layer == layer):
                return rec
        raise KeyError(f"no record for timestep {timestep}")


class ChainController(AttentionController):
    """Runs controllers in order; each sees the previous one's output."""

    def __init__(self, *controllers: AttentionController):
        self.controllers = list(controllers)

    def cross_attention(self, maps, timestep, layer, tokens):
        for c in self.controllers:
            maps = c.cross_attention(maps, timestep, layer, tokens)
        return maps

    def self_attention(self, maps, timestep, layer):
        for c in self.controllers:
            maps = c.self_attention(maps, timestep, layer)
        return maps
