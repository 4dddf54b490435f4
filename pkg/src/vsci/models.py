"""Trainable model wrappers: shared parameters, per-sample iteration maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoisers import ConvResidualDenoiser
from .maps import DeGapMap, DeRnnMap, GatedConvCell


@dataclass
class DeGapModel:
    """Projection-then-denoise model whose parameters live in the denoiser."""

    denoiser: ConvResidualDenoiser

    def make_map(self, mask, y) -> DeGapMap:
        return DeGapMap(denoiser=self.denoiser, mask=mask, y=y)

    def get_params(self) -> np.ndarray:
        return self.denoiser.get_theta()

    def set_params(self, theta: np.ndarray) -> None:
        self.denoiser.set_theta(theta)

    def n_params(self) -> int:
        return self.denoiser.n_params()

    def spectral_normalize(self, n_iters: int) -> None:
        self.denoiser.spectral_normalize(n_iters)


@dataclass
class DeRnnModel:
    """Gated-cell refinement model; parameters live in the cell."""

    cell: GatedConvCell

    def make_map(self, mask, y) -> DeRnnMap:
        return DeRnnMap(cell=self.cell, mask=mask, y=y)

    def get_params(self) -> np.ndarray:
        return self.cell.flatten()

    def set_params(self, theta: np.ndarray) -> None:
        self.cell.unflatten(theta)

    def n_params(self) -> int:
        return self.cell.n_params()

    def spectral_normalize(self, n_iters: int) -> None:
        self.cell.spectral_normalize(n_iters)
