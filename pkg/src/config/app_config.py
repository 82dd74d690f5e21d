#!/usr/bin/env python3
"""
Application Configuration
Environment settings for the flow toolkit and the "key = value" pipeline
configuration shared by every CLI stage.
"""

import os
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

from src.core.errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

CLUSTER_STRATEGIES = ('kmeans', 'gmm', 'dbscan')


@dataclass
class RuntimeSettings:
    """Process-wide settings read from the environment"""
    log_level: str = 'info'
    log_to_file: bool = False
    threads: int = 0  # 0 = auto

    @classmethod
    def from_environment(cls) -> 'RuntimeSettings':
        """Create settings from environment variables"""
        try:
            threads = int(os.getenv('STFLOW_THREADS', '0'))
        except ValueError:
            raise ConfigError('STFLOW_THREADS', 'must be a non-negative integer')
        if threads < 0:
            raise ConfigError('STFLOW_THREADS', 'must be a non-negative integer')
        return cls(
            log_level=os.getenv('LOG_LEVEL', 'info'),
            log_to_file=os.getenv('LOG_TO_FILE', 'false').lower() == 'true',
            threads=threads,
        )

    @property
    def worker_count(self) -> int:
        """Thread cap for per-slice work"""
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


@dataclass
class PipelineConfig:
    """Every documented pipeline key with its default"""
    seed: int = 0

    # scene
    width: int = 64
    height: int = 64
    texture: str = 'noise'
    ramp_slope: float = 0.1
    ramp_offset: float = 0.0
    motion: str = 'translation'
    motion_u: float = 3.0
    motion_v: float = 0.0
    motion_u2: float = -2.0
    motion_v2: float = 0.0
    rotation: float = 0.1
    duration: float = 1.0
    n_frames: int = 3
    substeps: int = 200
    C: float = 0.05
    T: int = 20
    blur_len: int = 8
    drop: int = 2

    # boundary
    K: int = 10
    canny_sigma: float = 1.4
    canny_lo: float = 0.1
    canny_hi: float = 0.3
    n_min: int = 1
    tau: float = 0.1
    template_threshold: float = 0.5

    # gradient and boundary similarity histograms
    win: int = 16
    stride: int = 8
    hist_bins: int = 8
    hist_lo: float = 0.0
    hist_hi: float = 1.0
    common_sigma: float = 1.0

    # correlation
    radius: int = 4
    levels: int = 2

    # spatial clustering
    kmeans_k: int = 8
    kmeans_alpha: float = 0.5
    kmeans_tol: float = 1e-4
    kmeans_max_iter: int = 50
    kmeans_init: str = 'farthest'
    cluster_smooth: int = 3
    cluster_strategy: str = 'kmeans'
    dbscan_min_samples: int = 8

    # temporal tracking
    ekf_q: Tuple[float, ...] = (0.1, 0.1, 0.5, 0.5, 0.05)
    ekf_r: Tuple[float, ...] = (1.0, 1.0, 0.1)
    c_min: float = 0.1
    lost_after: int = 3

    # decoding, losses, refinement
    temperature: float = 0.1
    p: float = 0.4
    eps: float = 1e-3
    refine_steps: int = 50
    refine_lr: float = 0.5
    lambdas: Tuple[float, ...] = (0.1, 0.1, 1.0, 1.0, 0.5)

    # run
    clustering: bool = True
    ablations: bool = False
    input: str = ''
    out: str = 'out'

    def with_overrides(self, overrides: Dict[str, str]) -> 'PipelineConfig':
        """Return a copy with textual overrides applied and validated"""
        updated = replace(self, **_parse_values(overrides))
        updated.validate()
        return updated

    def validate(self) -> None:
        """Raise ConfigError naming the first key outside its range"""
        checks = [
            ('T', self.T >= 1, 'must be >= 1'),
            ('K', self.K >= 2, 'must be >= 2'),
            ('C', self.C > 0, 'must be > 0'),
            ('width', self.width >= 8, 'must be >= 8'),
            ('height', self.height >= 8, 'must be >= 8'),
            ('texture', self.texture in ('flat', 'ramp', 'noise'), 'must be flat, ramp or noise'),
            ('motion', self.motion in ('translation', 'rotation', 'two_region'),
             'must be translation, rotation or two_region'),
            ('duration', self.duration > 0, 'must be > 0'),
            ('n_frames', self.n_frames >= 2, 'must be >= 2'),
            ('substeps', self.substeps >= 1, 'must be >= 1'),
            ('blur_len', self.blur_len >= 1, 'must be >= 1'),
            ('drop', self.drop >= 1, 'must be >= 1'),
            ('canny_sigma', self.canny_sigma > 0, 'must be > 0'),
            ('canny_lo', 0 < self.canny_lo < self.canny_hi, 'must satisfy 0 < canny_lo < canny_hi'),
            ('canny_hi', self.canny_hi <= 1, 'must be <= 1'),
            ('n_min', self.n_min >= 1, 'must be >= 1'),
            ('tau', self.tau > 0, 'must be > 0'),
            ('template_threshold', 0 < self.template_threshold < 1, 'must lie in (0, 1)'),
            ('win', self.win >= 1, 'must be >= 1'),
            ('stride', self.stride >= 1, 'must be >= 1'),
            ('hist_bins', self.hist_bins >= 1, 'must be >= 1'),
            ('hist_hi', self.hist_lo < self.hist_hi, 'must exceed hist_lo'),
            ('common_sigma', self.common_sigma >= 0, 'must be >= 0'),
            ('radius', self.radius >= 1, 'must be >= 1'),
            ('levels', self.levels >= 1, 'must be >= 1'),
            ('kmeans_k', self.kmeans_k >= 1, 'must be >= 1'),
            ('kmeans_alpha', 0 <= self.kmeans_alpha <= 1, 'must lie in [0, 1]'),
            ('kmeans_tol', self.kmeans_tol >= 0, 'must be >= 0'),
            ('kmeans_max_iter', self.kmeans_max_iter >= 1, 'must be >= 1'),
            ('kmeans_init', self.kmeans_init in ('first', 'farthest'), 'must be first or farthest'),
            ('cluster_smooth', self.cluster_smooth >= 0, 'must be >= 0'),
            ('cluster_strategy', self.cluster_strategy in CLUSTER_STRATEGIES,
             'must be one of ' + ', '.join(CLUSTER_STRATEGIES)),
            ('dbscan_min_samples', self.dbscan_min_samples >= 1, 'must be >= 1'),
            ('ekf_q', len(self.ekf_q) == 5 and min(self.ekf_q) >= 0, 'needs 5 non-negative values'),
            ('ekf_r', len(self.ekf_r) == 3 and min(self.ekf_r) >= 0, 'needs 3 non-negative values'),
            ('c_min', self.c_min >= 0, 'must be >= 0'),
            ('lost_after', self.lost_after >= 1, 'must be >= 1'),
            ('temperature', self.temperature > 0, 'must be > 0'),
            ('p', 0 < self.p <= 1, 'must lie in (0, 1]'),
            ('eps', self.eps > 0, 'must be > 0'),
            ('refine_steps', self.refine_steps >= 0, 'must be >= 0'),
            ('refine_lr', self.refine_lr > 0, 'must be > 0'),
            ('lambdas', len(self.lambdas) == 5 and min(self.lambdas) >= 0,
             'needs 5 non-negative weights'),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, message)

    def to_text(self) -> str:
        """Render as a config file that load_pipeline_config reads back"""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ','.join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f"{f.name} = {value}")
        return '\n'.join(lines) + '\n'


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(key, 'unknown configuration key')
    raw = raw.strip()
    try:
        if kind in (int, 'int'):
            return int(raw)
        if kind in (float, 'float'):
            return float(raw)
        if kind in (bool, 'bool'):
            lowered = raw.lower()
            if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                raise ValueError(raw)
            return lowered in ('true', '1', 'yes')
        if kind in (str, 'str'):
            return raw
        # comma separated float vectors
        return tuple(float(part) for part in raw.split(',') if part.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}")


def _parse_values(pairs: Dict[str, str]) -> Dict[str, object]:
    return {key: _parse_value(key, raw) for key, raw in pairs.items()}


def parse_config_text(text: str) -> Dict[str, str]:
    """Split "key = value" lines; '#' starts a comment"""
    pairs: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {number}", f"expected 'key = value', got {line!r}")
        key, value = line.split('=', 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_set_overrides(items: Iterable[str]) -> Dict[str, str]:
    """Turn repeated --set key=value flags into a mapping"""
    pairs: Dict[str, str] = {}
    for item in items:
        if '=' not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split('=', 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_pipeline_config(path: Optional[Path] = None,
                         overrides: Optional[Dict[str, str]] = None,
                         seed: Optional[int] = None,
                         out: Optional[str] = None) -> PipelineConfig:
    """
    Build a validated PipelineConfig.

    Precedence, lowest first: defaults, config file, --set overrides,
    the dedicated --seed / --out flags.
    """
    pairs: Dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError('config', f"cannot read {path}: {e}")
        pairs.update(parse_config_text(text))
    if overrides:
        pairs.update(overrides)
    if seed is not None:
        pairs['seed'] = str(seed)
    if out is not None:
        pairs['out'] = out

    config = PipelineConfig().with_overrides(pairs)
    logger.debug(f"Pipeline configuration loaded ({len(pairs)} explicit keys)")
    return config


# Global settings instance
settings = RuntimeSettings.from_environment()
