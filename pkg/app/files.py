import csv
import gzip
import io
import json
from collections.abc import Iterable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any, TextIO

import yaml

from app.logger import base_logger

logger = base_logger.getChild(__name__)

GZIP_MAGIC = b"\x1f\x8b"


class FileUtils:
    @staticmethod
    def _is_gzip(filepath: Path) -> bool:
        with filepath.open("rb") as handle:
            return handle.read(2) == GZIP_MAGIC

    # Public methods

    @staticmethod
    @contextmanager
    def open_text(path: str | Path) -> Iterator[TextIO]:
        """Open a text file for reading, transparently decompressing gzip (detected by magic bytes)."""
        filepath = Path(path)
        if FileUtils._is_gzip(filepath):
            with gzip.open(filepath, "rt", encoding="ascii") as handle:
                yield handle
        else:
            with filepath.open(encoding="ascii") as handle:
                yield handle

    @staticmethod
    def write_text(path: str | Path, lines: Iterable[str], *, compress: bool = False) -> Path:
        filepath = Path(path)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        if compress:
            # no name and no mtime in the header: the bytes depend on the content only
            with filepath.open("wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as gz:
                wrapper = io.TextIOWrapper(gz, encoding="ascii", newline="\n")
                for line in lines:
                    wrapper.write(f"{line}\n")
                wrapper.flush()
                wrapper.detach()
        else:
            with filepath.open("w", encoding="ascii", newline="\n") as handle:
                for line in lines:
                    handle.write(f"{line}\n")
        return filepath

    @staticmethod
    def read_json_file(path: str | Path) -> Any | None:  # noqa: ANN401
        filepath = Path(path)
        try:
            if filepath.exists():
                return json.loads(filepath.read_text(encoding="utf-8"))
        except Exception:
            logger.exception("Failed to read JSON file")
        return None

    @staticmethod
    def read_config_file(path: str | Path) -> dict[str, Any]:
        """Read a YAML or JSON mapping. Unlike read_json_file, failures propagate to the caller."""
        filepath = Path(path)
        text = filepath.read_text(encoding="utf-8")
        try:
            data = json.loads(text) if filepath.suffix == ".json" else yaml.safe_load(text)
        except yaml.YAMLError as e:
            msg = f"Config file {filepath} is not valid YAML: {e}"
            raise ValueError(msg) from e
        if data is None:
            return {}
        if not isinstance(data, dict):
            msg = f"Config file {filepath} must contain a mapping, got {type(data).__name__}"
            raise TypeError(msg)
        return data

    @staticmethod
    def write_data_to_file(path: str | Path, data: Any) -> Path:  # noqa: ANN401
        filepath = Path(path)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        filepath.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info("Wrote %s", filepath)
        return filepath

    @staticmethod
    def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        filepath = Path(path)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with filepath.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        logger.info("Wrote %s", filepath)
        return filepath

    @staticmethod
    def read_csv(path: str | Path) -> list[dict[str, str]]:
        filepath = Path(path)
        with filepath.open(encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))
