# src/adapters/dependencies.py
"""
Dependency wiring for the flow toolkit.

This module builds the artifact codecs, the bundle repository and the
pipeline service, and hands them to the CLI.

Key responsibilities:
- Codec registration per file extension
- Repository initialization
- Service initialization and wiring
"""

import logging
from typing import Dict, Optional

from src.config.app_config import settings
from src.core.ports import IArtifactParser
from src.core.repositories import IBundleRepository
from src.services.ports import IPipelineService
from src.services.pipeline import PipelineService
from src.adapters.parsers.event_csv_parser import EventCsvParser
from src.adapters.parsers.flow_raster_parser import FlowRasterParser
from src.adapters.parsers.png_parser import PngImageParser
from src.adapters.repositories import DirectoryBundleRepository

logger = logging.getLogger(__name__)


def get_codec_map() -> Dict[str, IArtifactParser]:
    """
    Create and return a mapping of file extensions to their codecs.

    Returns:
        Dict[str, IArtifactParser]: Mapping of file extensions to codec instances
    """
    return {
        ".csv": EventCsvParser(),
        ".png": PngImageParser(),
        ".stfl": FlowRasterParser(),
    }


def get_bundle_repository() -> IBundleRepository:
    """
    Create the directory-backed bundle repository.

    Returns:
        IBundleRepository: Repository using the default codecs
    """
    return DirectoryBundleRepository(get_codec_map())


def get_pipeline_service(workers: Optional[int] = None) -> IPipelineService:
    """
    Create and configure the pipeline service with all dependencies.

    Args:
        workers (int, optional): Thread cap for per-slice work. Defaults to STFLOW_THREADS / CPU count.

    Returns:
        IPipelineService: Configured pipeline service instance
    """
    workers = settings.worker_count if workers is None else workers
    logger.debug(f"Pipeline service with {workers} workers")
    return PipelineService(repository=get_bundle_repository(), workers=workers)
