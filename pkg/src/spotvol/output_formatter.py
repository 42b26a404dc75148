import json
import os
from pathlib import Path as FilePath
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
from jinja2 import Template

from .models import CurveResult, EstimateSeries, FilterDiagnostics, Path, TableResult

PathLike = Union[str, FilePath]

DATA_FLOAT_FORMAT = "%.15g"
TABLE_FLOAT_FORMAT = "%.5e"

TABLE_COLUMNS = ["model", "method", "mean", "std", "n", "dropped"]

# Published means and standard deviations over 1,000 paths, keyed by (model, method).
REFERENCE_VALUES: dict[str, dict[tuple[str, str], tuple[float, float]]] = {
    "table1": {
        ("lin", "semi"): (1.0083e-4, 1.0397e-4),
        ("lin", "ker"): (0.9747e-4, 1.1800e-4),
        ("quad", "semi"): (0.9454e-4, 0.9621e-4),
        ("quad", "ker"): (1.0691e-4, 1.3238e-4),
        ("cube", "semi"): (2.3153e-4, 2.6087e-4),
        ("cube", "ker"): (2.6172e-4, 3.7640e-4),
        ("nlin", "semi"): (0.2597e-4, 0.2544e-4),
        ("nlin", "ker"): (0.2828e-4, 0.3272e-4),
    },
    "table2": {
        ("lin", "semi"): (5.3036e-4, 0.6111e-4),
        ("lin", "ker"): (5.3039e-4, 0.6096e-4),
        ("quad", "semi"): (5.7694e-4, 1.3237e-4),
        ("quad", "ker"): (5.7744e-4, 1.3240e-4),
        ("cube", "semi"): (14.3737e-4, 8.3288e-4),
        ("cube", "ker"): (14.3431e-4, 8.2681e-4),
        ("nlin", "semi"): (1.5188e-4, 0.1456e-4),
        ("nlin", "ker"): (1.5208e-4, 0.1452e-4),
    },
}


def _write_frame(frame: pd.DataFrame, file_path: PathLike, float_format: str) -> str:
    FilePath(file_path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(
        file_path,
        index=False,
        float_format=float_format,
        na_rep="",
        lineterminator="\n",
    )
    return os.path.abspath(file_path)


class OutputFormatter:
    """Writes paths, estimates and tables as CSV, plus the run manifest and report."""

    def __init__(self) -> None:
        self.report_template = self._get_report_template()

    def write_path_csv(self, path: Path, file_path: PathLike) -> str:
        frame = pd.DataFrame({"t": path.times, "x": path.values})
        return _write_frame(frame, file_path, DATA_FLOAT_FORMAT)

    def read_path_csv(self, file_path: PathLike) -> Path:
        """Read a ``t,x`` CSV with equidistant times."""
        frame = pd.read_csv(file_path)
        if list(frame.columns) != ["t", "x"]:
            raise ValueError(f"path CSV '{file_path}' must have the columns t,x")
        if len(frame) < 2:
            raise ValueError(f"path CSV '{file_path}' needs at least 2 rows")
        t = frame["t"].to_numpy(dtype=float)
        steps = np.diff(t)
        dt = (t[-1] - t[0]) / (t.size - 1)
        if dt <= 0 or not np.allclose(steps, dt, rtol=1e-6, atol=0.0):
            raise ValueError(f"times in '{file_path}' are not equidistant")
        return Path(dt=dt, values=frame["x"].to_numpy(dtype=float), t0=t[0])

    def write_estimate_csv(self, series: EstimateSeries, file_path: PathLike) -> str:
        frame = pd.DataFrame(
            {"t": series.times, "x": series.x, "y_filtered": series.y_filtered}
        )
        return _write_frame(frame, file_path, DATA_FLOAT_FORMAT)

    def write_spot_csv(
        self, times: Any, x: Any, y_estimate: Any, file_path: PathLike
    ) -> str:
        frame = pd.DataFrame({"t": times, "x": x, "y_estimate": y_estimate})
        return _write_frame(frame, file_path, DATA_FLOAT_FORMAT)

    def write_curves_csv(self, curve: CurveResult, file_path: PathLike) -> str:
        frame = pd.DataFrame(
            {
                "x": curve.x,
                "g_true": curve.g_true,
                "y_semi": curve.y_semi,
                "y_local_linear": curve.y_local_linear,
            }
        )
        return _write_frame(frame, file_path, DATA_FLOAT_FORMAT)

    def table_frame(self, table: TableResult) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "model": row.model,
                    "method": row.method,
                    "mean": row.stats.mean,
                    "std": np.nan if row.stats.std is None else row.stats.std,
                    "n": row.stats.n,
                    "dropped": row.dropped,
                }
                for row in table.rows
            ],
            columns=TABLE_COLUMNS,
        )

    def write_table_csv(self, table: TableResult, file_path: PathLike) -> str:
        return _write_frame(self.table_frame(table), file_path, TABLE_FLOAT_FORMAT)

    def write_curve_summary_csv(
        self, curves: list[CurveResult], file_path: PathLike
    ) -> str:
        rows = []
        for curve in curves:
            for method, stats in (("semi", curve.rmse_semi), ("ker", curve.rmse_ker)):
                rows.append(
                    {
                        "model": curve.model,
                        "dt": curve.dt,
                        "method": method,
                        "mean": stats.mean,
                        "std": np.nan if stats.std is None else stats.std,
                        "n": stats.n,
                        "dropped": curve.dropped,
                    }
                )
        columns = ["model", "dt", "method", "mean", "std", "n", "dropped"]
        frame = pd.DataFrame(rows, columns=columns)
        return _write_frame(frame, file_path, TABLE_FLOAT_FORMAT)

    def format_diagnostics(
        self, diagnostics: FilterDiagnostics, extra: Optional[dict[str, Any]] = None
    ) -> str:
        values = {**diagnostics.model_dump(), **(extra or {})}
        return "".join(f"{key}={_plain(value)}\n" for key, value in values.items())

    def write_diagnostics(
        self,
        diagnostics: FilterDiagnostics,
        file_path: PathLike,
        extra: Optional[dict[str, Any]] = None,
    ) -> str:
        FilePath(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.format_diagnostics(diagnostics, extra))
        return os.path.abspath(file_path)

    def format_manifest(
        self,
        command: str,
        config: dict[str, Any],
        details: Optional[dict[str, Any]] = None,
    ) -> str:
        """Resolved configuration and run details as JSON, without timestamps."""
        from . import __version__

        manifest = {
            "command": command,
            "version": __version__,
            "config": config,
            **(details or {}),
        }
        return json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n"

    def write_manifest(
        self,
        file_path: PathLike,
        command: str,
        config: dict[str, Any],
        details: Optional[dict[str, Any]] = None,
    ) -> str:
        FilePath(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.format_manifest(command, config, details))
        return os.path.abspath(file_path)

    def format_report(
        self, tables: list[TableResult], curves: Optional[list[CurveResult]] = None
    ) -> str:
        """Markdown report placing each table next to the reference values."""
        sections = []
        for table in tables:
            reference = REFERENCE_VALUES.get(table.name, {})
            rows = []
            for row in table.rows:
                ref = reference.get((row.model, row.method))
                rows.append(
                    {
                        "row": row,
                        "ref": ref,
                        "deviation": (
                            (row.stats.mean - ref[0]) / ref[0] if ref else None
                        ),
                    }
                )
            sections.append({"table": table, "rows": rows})

        template = Template(self.report_template, trim_blocks=True, lstrip_blocks=True)
        return template.render(sections=sections, curves=curves or [])

    def write_report(
        self,
        file_path: PathLike,
        tables: list[TableResult],
        curves: Optional[list[CurveResult]] = None,
    ) -> str:
        FilePath(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.format_report(tables, curves))
        return os.path.abspath(file_path)

    def _get_report_template(self) -> str:
        """Get the default Markdown report template."""
        return """# Spot volatility experiments

{% for section in sections %}
## {{ section.table.name }}

| model | method | mean | std | n | dropped | reference mean | reference std | deviation |
|---|---|---|---|---|---|---|---|---|
{% for item in section.rows %}
| {{ item.row.model }} | {{ item.row.method }} | {{ "%.4e"|format(item.row.stats.mean) }} | {{ "%.4e"|format(item.row.stats.std) if item.row.stats.std is not none else "" }} | {{ item.row.stats.n }} | {{ item.row.dropped }} | {{ "%.4e"|format(item.ref[0]) if item.ref else "" }} | {{ "%.4e"|format(item.ref[1]) if item.ref else "" }} | {{ "%+.1f%%"|format(100 * item.deviation) if item.deviation is not none else "" }} |
{% endfor %}

{% endfor %}
{% if curves %}
## curves

| model | dt | semi RMSE | local linear RMSE | paths | dropped |
|---|---|---|---|---|---|
{% for curve in curves %}
| {{ curve.model }} | {{ "%g"|format(curve.dt) }} | {{ "%.4e"|format(curve.rmse_semi.mean) }} | {{ "%.4e"|format(curve.rmse_ker.mean) }} | {{ curve.rmse_semi.n }} | {{ curve.dropped }} |
{% endfor %}
{% endif %}
"""


def _plain(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.15g}"
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value
