"""
CSV and markdown emitters for benchmark, accuracy, sweep and comparison tables.

Markdown tables are rendered through the template engine and show
milliseconds at two decimals; CSV keeps full precision (repr floats) so the
numbers re-parse to exactly the values in memory.
"""
import csv
import io
from typing import Iterable, List, Sequence

from django.template.loader import render_to_string

from edgebench.bench_harness import BenchReport, ComparisonTable
from edgebench.compressor import SparsitySweep
from edgebench.errors import ReportError

FORMATS = ('md', 'csv')

LATENCY_METRICS = (
    ('t_infer_1', 't_first_ms'),
    ('mean', 'mean_ms'),
    ('std', 'std_ms'),
    ('ste', 'ste_ms'),
)


def _check_format(output_format: str) -> None:
    if output_format not in FORMATS:
        raise ReportError(f"Unknown report format {output_format!r}; expected one of {', '.join(FORMATS)}")


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows([[repr(cell) if isinstance(cell, float) else cell for cell in row] for row in rows])
    return buffer.getvalue()


def _columns(reports: Sequence[BenchReport]) -> List[dict]:
    return [
        {
            'label': report.label,
            't_first_ms': report.t_first_ms,
            'mean_ms': report.mean_ms,
            'std_ms': report.std_ms,
            'ste_ms': report.ste_ms,
            'accuracy': report.accuracy,
        }
        for report in reports
    ]


def emit_report(reports: Sequence[BenchReport], output_format: str = 'md') -> str:
    """One column per report; rows t_infer_1, mean, std, ste, then accuracy."""
    _check_format(output_format)
    if not reports:
        raise ReportError("A latency report needs at least one benchmark record")
    columns = _columns(reports)

    if output_format == 'csv':
        rows = [[label] + [column[key] for column in columns] for label, key in LATENCY_METRICS]
        rows.append(['accuracy'] + [column['accuracy'] for column in columns])
        return _csv(['metric'] + [column['label'] for column in columns], rows)
    return render_to_string('pipeline/latency.md', {'columns': columns, 'metrics': LATENCY_METRICS})


def emit_accuracy(reports: Sequence[BenchReport], output_format: str = 'md') -> str:
    """Accuracy across formats: one row per format, one column per model."""
    _check_format(output_format)
    if not reports:
        raise ReportError("An accuracy table needs at least one benchmark record")

    model_ids: List[str] = []
    by_format = {}
    for report in reports:
        if report.model_id not in model_ids:
            model_ids.append(report.model_id)
        row = by_format.setdefault(report.format.value, {})
        row.setdefault(report.model_id, report.accuracy)
    rows = [{'format': fmt, 'accuracy': accuracy} for fmt, accuracy in by_format.items()]

    if output_format == 'csv':
        return _csv(['format'] + model_ids,
                    [[row['format']] + [row['accuracy'].get(m, '') for m in model_ids] for row in rows])
    return render_to_string('pipeline/accuracy.md', {'model_ids': model_ids, 'rows': rows})


def emit_sweep(sweep: SparsitySweep, output_format: str = 'md') -> str:
    """Plot-ready sweep rows: parameter counts, accuracy and loss at each sparsity."""
    _check_format(output_format)
    if not len(sweep):
        raise ReportError("Cannot emit an empty sparsity sweep")
    for row in sweep:
        if not 0.0 <= row.val_accuracy <= 1.0:
            raise ReportError(f"Accuracy {row.val_accuracy} outside [0, 1] at sparsity {row.sparsity}")

    if output_format == 'csv':
        return _csv(['sparsity', 'nonzero_params', 'total_params', 'val_accuracy', 'val_loss', 'epochs'],
                    [[row.sparsity, row.nonzero_params, row.total_params, row.val_accuracy, row.val_loss,
                      row.finetune_epochs] for row in sweep])
    return render_to_string('pipeline/sweep.md', {'rows': list(sweep)})


def emit_comparison(table: ComparisonTable, output_format: str = 'md') -> str:
    _check_format(output_format)
    if output_format == 'csv':
        return _csv(
            ['format', 'backend', 't_infer_1', 'mean', 'std', 'ste', 'accuracy', 'speedup', 'mean_ratio'],
            [[row.format.value, row.backend.value, row.t_first_ms, row.mean_ms, row.std_ms, row.ste_ms,
              row.accuracy, row.speedup, row.mean_ratio] for row in table.rows],
        )
    return render_to_string('pipeline/comparison.md', {'table': table})
