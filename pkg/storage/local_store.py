import hashlib
import json
import os
import time
from typing import Any, Dict, List, Optional

import pandas as pd

from shared.config import settings

RUNS_FILE = os.path.join(settings.data_dir, "runs_index.json")


def _load_index() -> Dict[str, Any]:
    if not os.path.exists(RUNS_FILE):
        return {}
    with open(RUNS_FILE, "r", encoding="utf-8") as f:
        return json.load(f)


def _save_index(idx: Dict[str, Any]) -> None:
    os.makedirs(os.path.dirname(RUNS_FILE) or ".", exist_ok=True)
    with open(RUNS_FILE, "w", encoding="utf-8") as f:
        json.dump(idx, f, ensure_ascii=False, indent=2)


def make_run_id(command: str, seed: int) -> str:
    base = f"{command}-{seed}-{time.time()}"
    return hashlib.sha1(base.encode()).hexdigest()[:16]


def file_sha1(path: str) -> str:
    """Content hash of an input file, as git would store the blob."""
    with open(path, "rb") as f:
        data = f.read()
    h = hashlib.sha1(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


def put_run(run_id: str, command: str, output_dir: str, manifest_path: str) -> None:
    idx = _load_index()
    idx[run_id] = {
        "run_id": run_id,
        "command": command,
        "output_dir": os.path.abspath(output_dir),
        "manifest": os.path.abspath(manifest_path),
        "ts": int(time.time() * 1000),
    }
    _save_index(idx)


def get_run(run_id: str) -> Optional[Dict[str, Any]]:
    return _load_index().get(run_id)


def all_runs() -> Dict[str, Any]:
    return _load_index()


# artifact writers


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_json(path: str, payload: Dict[str, Any]) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, default=_jsonable)
    return path


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_table(path: str, frame: pd.DataFrame) -> str:
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_matrix(path: str, values, columns: Optional[List[str]] = None) -> str:
    frame = pd.DataFrame(values, columns=columns)
    return write_table(path, frame)


def _jsonable(obj: Any):
    # numpy scalars and arrays
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")
