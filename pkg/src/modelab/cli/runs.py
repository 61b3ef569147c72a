"""Run directories, manifests and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import sys
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path

from ..tensor import checkpoint as ck

MANIFEST = "manifest.json"


def workdir_root(flag: str | None = None) -> Path:
    return Path(flag or os.environ.get("MODELAB_WORKDIR") or "runs")


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@lru_cache(maxsize=1)
def code_version() -> str:
    """sha256 over the package's source and data files."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def csv_text(rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


class Run:
    """One command invocation: ``<root>/<command>/<timestamp>-<seed>/`` plus its manifest."""

    def __init__(self, root: Path, command: str, config: dict, seed: int, args: dict):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        base = Path(root) / command
        base.mkdir(parents=True, exist_ok=True)
        d, k = base / f"{stamp}-{seed}", 0
        while True:
            try:
                d.mkdir()
                break
            except FileExistsError:
                k += 1
                d = base / f"{stamp}-{seed}-{k}"
        self.dir = d
        self.command = command
        self.config = config
        self.seed = seed
        self.args = args
        self.started = _now()
        self.artifacts: dict[str, dict] = {}

    def record(self, name: str) -> Path:
        """Register a file already written into the run directory."""
        path = self.dir / name
        self.artifacts[name] = {"path": name, "sha256": sha256_file(path)}
        return path

    def write_text(self, name: str, text: str) -> Path:
        (self.dir / name).write_text(text)
        return self.record(name)

    def write_report(self, stem: str, rows: list[dict], extra: dict | None = None) -> None:
        self.write_text(f"{stem}.csv", csv_text(rows))
        self.write_text(f"{stem}.json", json_text({"rows": rows, **(extra or {})}))

    def save_checkpoint(self, name: str, ckpt: ck.Checkpoint) -> Path:
        p = self.dir / name
        ck.save(p, ckpt)
        return self.record(name)

    def finish(self, status: str, exit_code: int, error: str | None = None) -> Path:
        manifest = {
            "command": self.command, "config": self.config, "seed": self.seed, "args": self.args,
            "code_version": code_version(), "python": sys.version.split()[0],
            "started": self.started, "finished": _now(), "status": status,
            "exit_code": exit_code, "error": error, "artifacts": self.artifacts,
        }
        p = self.dir / MANIFEST
        # exactly one manifest per run directory, never rewritten
        with open(p, "x") as fh:
            fh.write(json_text(manifest))
        return p


def load_manifest(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / MANIFEST).read_text())


def completed_runs(root: Path, command: str) -> list[Path]:
    base = Path(root) / command
    if not base.is_dir():
        return []
    out = []
    for d in sorted(base.iterdir()):
        m = d / MANIFEST
        if m.is_file() and json.loads(m.read_text()).get("status") == "ok":
            out.append(d)
    return out
