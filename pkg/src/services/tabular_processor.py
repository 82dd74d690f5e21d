#!/usr/bin/env python3
"""
Tabular Artifact Processing Service
Builds the pandas tables behind every CSV artifact (histograms, templates,
tracks, losses, metrics, ablations) and reads the reloadable ones back.
"""

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.core.errors import StflowError
from src.core.models import (
    BoundaryTemplate,
    Distribution,
    LossReport,
    MetricsReport,
    MotionTrack,
    TemplatePoint,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
METRIC_COLUMNS = ["epe", "f1_all", "tepe", "n_valid"]
TEMPLATE_COLUMNS = ["x", "y", "prob", "class"]


class TabularProcessor:
    """Utility class for tabular artifact operations"""

    @staticmethod
    def histogram_table(distributions: Dict[str, Distribution]) -> pd.DataFrame:
        """One row per bin; one mass column per named distribution (all share the edges)."""
        first = next(iter(distributions.values()))
        table = pd.DataFrame({"bin_lo": first.edges[:-1], "bin_hi": first.edges[1:]})
        for name, dist in distributions.items():
            table[name] = dist.mass
        return table

    @staticmethod
    def template_table(tmpl: BoundaryTemplate) -> pd.DataFrame:
        return pd.DataFrame(
            [(pt.x, pt.y, pt.probability, pt.boundary_class) for pt in tmpl.points],
            columns=TEMPLATE_COLUMNS,
        )

    @staticmethod
    def read_template(content: bytes) -> BoundaryTemplate:
        """Parse a template CSV written by template_table."""
        try:
            table = pd.read_csv(io.BytesIO(content))
        except (ValueError, pd.errors.ParserError) as e:
            raise StflowError(f"cannot read template table: {e}")
        missing = [c for c in TEMPLATE_COLUMNS if c not in table.columns]
        if missing:
            raise StflowError(f"template table lacks columns {missing}")
        points = [TemplatePoint(x=int(row.x), y=int(row.y), probability=float(row.prob),
                                boundary_class=int(row[4]))
                  for row in table[TEMPLATE_COLUMNS].itertuples()]
        return BoundaryTemplate(points=points)

    @staticmethod
    def track_table(tracks: Sequence[MotionTrack]) -> pd.DataFrame:
        """Long format: one row per (track, slice) with the filtered state."""
        rows = []
        for track in tracks:
            for k, state in enumerate(track.history):
                measured = track.measurements[k] is not None if k < len(track.measurements) else False
                rows.append((track.point_index, k, *(float(s) for s in state), measured, track.lost))
        return pd.DataFrame(rows, columns=["track", "slice", "x", "y", "u", "v", "c", "measured", "lost"])

    @staticmethod
    def loss_table(report: LossReport, extra: Optional[Dict[str, float]] = None) -> pd.DataFrame:
        """Per-term rows tagged with their objective phase and weight, then the weighted total."""
        l1, l2, l3, l4, l5 = report.lambdas
        rows = [
            ("phase1", "pho", report.pho, 1.0),
            ("phase1", "kl", report.kl, l1),
            ("phase1", "entropy", report.entropy, l2),
            ("phase2", "spa", report.spa, l3),
            ("phase2", "temp", report.temp, l4),
            ("phase2", "consis", report.consis, l5),
        ]
        for name, value in (extra or {}).items():
            rows.append(("extra", name, value, 0.0))
        rows.append(("total", "total", report.total, 1.0))
        return pd.DataFrame(rows, columns=["phase", "term", "value", "weight"])

    @staticmethod
    def metrics_table(report: MetricsReport) -> pd.DataFrame:
        return pd.DataFrame([[report.epe, report.f1_all, report.tepe, report.n_valid]],
                            columns=METRIC_COLUMNS)

    @staticmethod
    def metrics_line(report: MetricsReport) -> str:
        """The metrics row without its header, e.g. "0,0,,4096"."""
        text = TabularProcessor.to_csv_text(TabularProcessor.metrics_table(report))
        return text.splitlines()[1]

    @staticmethod
    def ablation_table(rows: List[Dict[str, object]]) -> pd.DataFrame:
        return pd.DataFrame(rows, columns=["variant", "epe", "f1_all", "tepe"])

    @staticmethod
    def sweep_table(rows: List[Dict[str, object]]) -> pd.DataFrame:
        return pd.DataFrame(rows, columns=["blur_len", "kl"])

    @staticmethod
    def series_table(name: str, values: Sequence[float], index_name: str = "step") -> pd.DataFrame:
        return pd.DataFrame({index_name: np.arange(len(values)), name: np.asarray(values, dtype=np.float64)})

    @staticmethod
    def to_csv_text(table: pd.DataFrame) -> str:
        """Deterministic CSV rendering shared by every artifact."""
        return table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    @staticmethod
    def write_csv(table: pd.DataFrame, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(TabularProcessor.to_csv_text(table))
        logger.debug(f"Wrote {path} ({len(table)} rows)")
        return path
