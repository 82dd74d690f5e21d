# src/core/repositories.py
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

import numpy as np

from .models import FlowField, SynthBundle


class IBundleRepository(ABC):
    """
    Repository interface for scene bundles and the raster artifacts derived from them.
    This defines what the pipeline stores without fixing the storage layout.
    """

    @abstractmethod
    def save_bundle(self, bundle: SynthBundle, root: Path) -> Path:
        """Store a bundle under root; returns the bundle directory."""
        pass

    @abstractmethod
    def load_bundle(self, root: Path) -> SynthBundle:
        """Load a bundle previously written by save_bundle."""
        pass

    @abstractmethod
    def save_flow(self, flow: FlowField, path: Path) -> None:
        """Store a flow field (or a scalar map in its u plane) as a float raster."""
        pass

    @abstractmethod
    def load_flow(self, path: Path) -> FlowField:
        pass

    @abstractmethod
    def save_image(self, data: np.ndarray, path: Path) -> None:
        """Store an intensity raster in [0, 1], a binary map or an (H, W, 3) uint8 colour image."""
        pass

    @abstractmethod
    def load_mask(self, path: Path, shape: Optional[tuple] = None) -> np.ndarray:
        """Read a PNG as a boolean validity mask (non-zero = valid)."""
        pass
