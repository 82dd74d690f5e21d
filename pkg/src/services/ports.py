# src/services/ports.py
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional

from src.config.app_config import PipelineConfig
from src.core.models import MetricsReport


class IPipelineService(ABC):
    """
    The main entry point for the application's logic.
    This is the interface the CLI calls; every method writes its artifacts below config.out.
    """

    @abstractmethod
    def synth(self, config: PipelineConfig) -> Path:
        pass

    @abstractmethod
    def gradients(self, config: PipelineConfig, sweep_blur: Optional[List[int]] = None) -> Path:
        pass

    @abstractmethod
    def boundary(self, config: PipelineConfig) -> Path:
        pass

    @abstractmethod
    def refine(self, config: PipelineConfig) -> Path:
        pass

    @abstractmethod
    def fuse(self, config: PipelineConfig, init_flow: Optional[Path] = None,
             template: Optional[Path] = None) -> Path:
        pass

    @abstractmethod
    def gradcheck(self, config: PipelineConfig, instances: int = 1) -> float:
        pass

    @abstractmethod
    def evaluate(self, pred: Path, gt: Path, mask: Optional[Path] = None) -> MetricsReport:
        pass

    @abstractmethod
    def visualize(self, flow: Path, max_mag: Optional[float], out: Path) -> Path:
        pass

    @abstractmethod
    def run_pipeline(self, config: PipelineConfig) -> MetricsReport:
        pass
