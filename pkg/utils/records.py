"""JSON-lines logs, JSON reports and CSV sweep tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Type, TypeVar

from pydantic import BaseModel

M = TypeVar("M", bound=BaseModel)


def _dump(record: BaseModel) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True)


class JsonLinesWriter:
    """Appends one JSON object per line; usable directly as an epoch callback."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("", encoding="utf-8")

    def __call__(self, record: BaseModel) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(_dump(record) + "\n")


def read_json_lines(path: str | Path, model: Type[M]) -> List[M]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [model(**json.loads(line)) for line in lines if line.strip()]


def write_json(record: BaseModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path, model: Type[M]) -> M:
    return model(**json.loads(Path(path).read_text(encoding="utf-8")))


def write_csv(rows: Iterable[BaseModel], path: str | Path, model: Type[BaseModel]) -> Path:
    """Header is the model's field order; None is written as an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(model.model_fields)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.model_dump(mode="json").items()})
    return path


def read_csv(path: str | Path, model: Type[M]) -> List[M]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [model(**{k: v for k, v in row.items() if v != ""}) for row in csv.DictReader(fh)]
