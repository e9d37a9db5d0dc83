import hashlib
import json
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from .errors import MissingRunError

CONFIG_FILE = "config.json"
RUN_FILE = "run.json"
REPORT_FILE = "report.json"
TRACE_FILE = "trace.csv"
CHECKPOINT_FILE = "model.ckpt"
EVENTS_FILE = "events.jsonl"


def git_blob_hash(path: Union[str, Path]) -> str:
    """SHA-1 of ``blob <size>\\0<content>``, the id git gives the same file"""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_digest(paths: Iterable[Union[str, Path]]) -> str:
    """One digest over the blob hashes of many files, independent of argument order"""
    combined = hashlib.sha1()
    for blob in sorted(git_blob_hash(p) for p in paths):
        combined.update(blob.encode("ascii"))
    return combined.hexdigest()


class RunDirectory:
    """Artifacts of one scenario run: config, run metadata, report, trace, checkpoint, events"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        os.makedirs(self.path, exist_ok=True)

        self.config_file = self.path / CONFIG_FILE
        self.run_file = self.path / RUN_FILE
        self.report_file = self.path / REPORT_FILE
        self.trace_file = self.path / TRACE_FILE
        self.checkpoint_file = self.path / CHECKPOINT_FILE
        self.events_file = self.path / EVENTS_FILE

    @property
    def name(self) -> str:
        return self.path.name

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        """Write a JSON artifact (replacing any previous one)"""
        target = self.path / name
        tmp = target.with_name(f".{target.name}.tmp")
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        os.replace(tmp, target)
        return target

    def read_json(self, name: str) -> Optional[Dict[str, Any]]:
        """A JSON artifact, or None when it is absent or unreadable"""
        target = self.path / name
        if not target.exists():
            return None
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (json.JSONDecodeError, IOError):
            return None

    def append_event(self, event: str, **fields: Any):
        """Append to the event log (JSONL format)"""
        record = {"timestamp": datetime.now().isoformat(), "event": event, **fields}
        with open(self.events_file, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, ensure_ascii=False) + '\n')

    def events(self) -> List[Dict[str, Any]]:
        if not self.events_file.exists():
            return []
        with open(self.events_file, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]

    def clear_events(self):
        """Start a fresh event log; reruns of the same config reuse the directory"""
        if self.events_file.exists():
            self.events_file.unlink()

    def load_report(self) -> Dict[str, Any]:
        report = self.read_json(REPORT_FILE)
        if report is None:
            raise MissingRunError(f"{self.path} has no readable {REPORT_FILE}")
        return report

    def load_config(self) -> Dict[str, Any]:
        config = self.read_json(CONFIG_FILE)
        if config is None:
            raise MissingRunError(f"{self.path} has no readable {CONFIG_FILE}")
        return config


def find_runs(root: Union[str, Path]) -> List[RunDirectory]:
    """Run directories (those holding a report) directly below root, sorted by name"""
    root = Path(root)
    if not root.is_dir():
        return []
    return [RunDirectory(p) for p in sorted(root.iterdir()) if (p / REPORT_FILE).exists()]
