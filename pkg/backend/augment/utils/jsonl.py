"""Line-delimited JSON files, written atomically."""
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Union

PathLike = Union[str, Path]


def dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False)


def read_records(path: PathLike) -> Iterator[tuple[int, dict]]:
    """Yield (line number, record) pairs, skipping blank lines."""
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if line:
                yield lineno, json.loads(line)


def write_records(path: PathLike, records: Iterable[dict]) -> int:
    """Replace ``path`` with one JSON record per line; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            for record in records:
                f.write(dumps(record))
                f.write('\n')
                count += 1
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return count


def append_record(path: PathLike, record: dict) -> None:
    with open(path, 'a', encoding='utf-8', newline='\n') as f:
        f.write(dumps(record))
        f.write('\n')


def write_json(path: PathLike, payload: dict) -> None:
    """Pretty JSON with sorted keys and a trailing newline, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False))
            f.write('\n')
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: PathLike) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
