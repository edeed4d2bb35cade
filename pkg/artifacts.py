import json
import logging
import os
import tempfile
from pathlib import Path

from errors import DataFormatError, ExportError

# Configure logging
logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def canonical_json(data) -> str:
    """Key-sorted, LF-terminated JSON so equal content gives equal bytes"""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_atomic(path, text: str) -> Path:
    """Write through a temporary file in the target directory, then rename over the target"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise ExportError(path, e) from e
    logger.debug(f"Wrote {path}")
    return path


def write_json(path, data) -> Path:
    return write_atomic(path, canonical_json(data))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: {e}") from e
