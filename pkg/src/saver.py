"""
Report Saver Module
===================

Writes experiment results to CSV or structured-text (JSON) files and exports
raw features for external visualisation tools.

Output File Formats:

CSV:
- Header row exactly: experiment_id, model, attack, eps, acc, asr, dr, dsr,
  rho_l2, rho_px, fsa, fsd, train_s, test_s, seed
- One EvalReport per row; undefined values are empty cells
- Floats written with repr() so a re-read reproduces them exactly

Structured text (.json):
- One JSON document {"reports": [...]}, every EvalReport field including the
  configuration snapshot and extras

Feature export (SFEL container):
- benign / adversarial features, their SF / TF reconstructions, labels and
  success flags, for t-SNE or similar tools
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from checkpoint import save_container
from classifier import Classifier
from errors import FormatError
from evaluation import REPORT_FIELDS, EvalReport
from pairs import PairDataset
from sfe import SfeModel, generate_sf, generate_tf

logger = logging.getLogger(__name__)

FORMATS = ('csv', 'json')
INT_FIELDS = ('seed',)
STR_FIELDS = ('experiment_id', 'model', 'attack')


class ReportSaver:
    """
    Saves EvalReports to an output directory.

    Tracks:
    - files_saved: report files written
    - rows_written: reports written across all files
    - io_errors: failed writes
    """

    def __init__(self, output_dir: Union[str, Path] = 'results'):
        self.output_dir = Path(output_dir)
        self.stats = {'files_saved': 0, 'rows_written': 0, 'io_errors': 0}

    def save(self, reports: Sequence[EvalReport], name: str, fmt: str = 'csv') -> Path:
        """
        Write `reports` to <output_dir>/<name>.<fmt>.

        Raises:
            ValueError: unknown format
            OSError: unwritable path
        """
        if fmt not in FORMATS:
            raise ValueError(f"Unknown report format '{fmt}' (expected one of {FORMATS})")
        path = self.output_dir / f"{name}.{fmt}"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if fmt == 'csv':
                self._write_csv(reports, path)
            else:
                self._write_json(reports, path)
        except OSError as e:
            logger.error(f"✗ Error saving report {path}: {e}")
            self.stats['io_errors'] += 1
            raise
        self.stats['files_saved'] += 1
        self.stats['rows_written'] += len(reports)
        logger.info(f"✓ Saved {len(reports)} report rows to {path}")
        return path

    def _write_csv(self, reports: Sequence[EvalReport], path: Path):
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=list(REPORT_FIELDS))
            writer.writeheader()
            for report in reports:
                writer.writerow({k: _format_cell(v) for k, v in report.row().items()})

    def _write_json(self, reports: Sequence[EvalReport], path: Path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'reports': [r.to_dict() for r in reports]}, f, indent=2, sort_keys=True)
            f.write('\n')

    def get_stats(self) -> dict:
        return self.stats.copy()

    def reset_stats(self):
        for key in self.stats:
            self.stats[key] = 0


def _format_cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(name: str, text: str):
    if name in STR_FIELDS:
        return text
    if text == '':
        return None
    if name in INT_FIELDS:
        return int(text)
    return float(text)


def export_report(reports: Union[EvalReport, Sequence[EvalReport]], path: Union[str, Path],
                  fmt: str = None) -> Path:
    """
    Write reports to `path`; the format defaults to the file suffix (.csv or .json).
    """
    path = Path(path)
    if isinstance(reports, EvalReport):
        reports = [reports]
    fmt = fmt or ('json' if path.suffix == '.json' else 'csv')
    saver = ReportSaver(path.parent)
    written = saver.save(list(reports), path.stem, fmt)
    if written != path:
        written.replace(path)
    return path


def read_report(path: Union[str, Path]) -> List[EvalReport]:
    """
    Parse a CSV or JSON report back into EvalReports.

    CSV rows carry only the schema columns; JSON restores every field.

    Raises:
        FormatError: header or document does not match the report schema
    """
    path = Path(path)
    if path.suffix == '.json':
        with open(path, encoding='utf-8') as f:
            try:
                doc = json.load(f)
                return [EvalReport(**entry) for entry in doc['reports']]
            except (ValueError, KeyError, TypeError) as e:
                raise FormatError(f"{path}: not a report document: {e}") from e

    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
            raise FormatError(f"{path}: header {reader.fieldnames} does not match {list(REPORT_FIELDS)}")
        return [EvalReport(**{k: _parse_cell(k, v) for k, v in row.items()}) for row in reader]


def export_features(clf: Classifier, sfe: SfeModel, pairs: PairDataset, path: Union[str, Path]) -> Path:
    """Features and their SF/TF reconstructions for external visualisation."""
    benign = clf.extract_feature(pairs.benign.images)
    adversarial = clf.extract_feature(pairs.adversarial)
    tensors: Dict[str, np.ndarray] = {
        'benign': benign,
        'adversarial': adversarial,
        'benign_sf': generate_sf(sfe, benign),
        'benign_tf': generate_tf(sfe, benign),
        'adversarial_sf': generate_sf(sfe, adversarial),
        'adversarial_tf': generate_tf(sfe, adversarial),
        'labels': pairs.labels.astype(np.float32),
        'success': pairs.success.astype(np.float32),
    }
    meta = {'kind': 'features', 'attack': {'name': pairs.attack_name, 'params': pairs.attack_params},
            'model': clf.arch, 'tap': clf.tap}
    path = save_container(path, tensors, meta)
    logger.info(f"✓ Exported features of {len(pairs)} pairs to {path}")
    return path
