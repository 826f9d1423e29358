"""CSV writing shared by every command that emits a table."""

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

logger = logging.getLogger(__name__)


def _format(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv_rows(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> int:
    """Write ``rows`` under a header of ``columns``; returns the number of data rows."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(value) for key, value in row.items()})
            count += 1
    logger.info("Wrote %d rows to %s", count, path)
    return count


def read_csv_rows(path: Union[str, Path]) -> List[dict]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
