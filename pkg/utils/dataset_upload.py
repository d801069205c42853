import io
import logging
from pathlib import Path

import chardet
import pandas as pd

logger = logging.getLogger(__name__)

SMILES_HEADERS = ('smiles',)


class MissingColumn(ValueError):
    def __init__(self, column, available):
        self.column = column
        self.available = list(available)
        super().__init__(f"column '{column}' not found; available columns: {', '.join(self.available)}")


def read_dataset_text(path):
    """
    Read a dataset file and decode it with the detected encoding (UTF-8 when
    detection is inconclusive).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")

    raw_data = path.read_bytes()
    encoding_detected = chardet.detect(raw_data)['encoding'] or 'UTF-8'
    if encoding_detected.lower() == 'ascii':
        encoding_detected = 'UTF-8'
    logger.debug(f"Detected encoding {encoding_detected} for {path}")
    return raw_data.decode(encoding_detected)


def _pick_column(columns, column):
    if column is not None:
        if column not in columns:
            raise MissingColumn(column, columns)
        return column
    for candidate in columns:
        if candidate.lower() in SMILES_HEADERS:
            return candidate
    for candidate in columns:
        if 'smiles' in candidate.lower():
            return candidate
    raise MissingColumn('smiles', columns)


def read_smiles_records(path, column=None):
    """
    Return ``(line_number, text)`` pairs in file order.

    Comma-separated files need a header row and a SMILES column (``column`` or
    auto-detected by name); other files hold one SMILES per line, optionally
    under a lone ``smiles`` header. Blank lines are ignored.
    """
    text = read_dataset_text(path)
    lines = text.splitlines()
    first = next((line for line in lines if line.strip()), '')

    if ',' in first:
        try:
            df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skip_blank_lines=False)
        except pd.errors.ParserError as e:
            raise ValueError(f"could not read CSV file {path}: {e}") from e
        df.columns = df.columns.str.strip()
        smiles_column = _pick_column(list(df.columns), column)
        logger.info(f"Reading SMILES column '{smiles_column}' from {path} ({len(df)} rows)")
        return [
            (index + 2, str(value).strip())
            for index, value in df[smiles_column].items()
            if str(value).strip()
        ]

    if column is not None and first.strip() != column:
        raise MissingColumn(column, [first.strip()] if first.strip() else [])

    records = []
    for number, line in enumerate(lines, start=1):
        value = line.strip()
        if not value:
            continue
        if not records and (value == column or value.lower() in SMILES_HEADERS):
            continue
        records.append((number, value))
    logger.info(f"Read {len(records)} SMILES lines from {path}")
    return records
