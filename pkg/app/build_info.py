from __future__ import annotations

import hashlib
import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

BASE_DIR = Path(__file__).resolve().parent.parent
APP_VERSION = "0.3.0"
RUN_LOG_NAME = "run.log"
LOG_FORMAT = "%(levelname)s %(name)s %(message)s"


def _collapse(value: Any) -> str:
    return " ".join(str(value or "").replace("\u0000", " ").split()).strip()


def _read_text(path: Path) -> str:
    return _collapse(path.read_text(encoding="utf-8", errors="ignore")) if path.is_file() else ""


def release_id() -> str:
    return _read_text(BASE_DIR / "VERSION.txt") or f"release-{APP_VERSION}"


def _read_git_head_commit() -> str:
    git_dir = BASE_DIR / ".git"
    head = _read_text(git_dir / "HEAD")
    if not head.startswith("ref:"):
        return head
    ref = head[len("ref:") :].strip()
    loose = _read_text(git_dir / ref)
    if loose:
        return loose
    # packed-refs lines are "<sha> <ref>"; peeled tags start with "^"
    packed = git_dir / "packed-refs"
    lines = packed.read_text(encoding="utf-8", errors="ignore").splitlines() if packed.is_file() else []
    for sha, _, name in (line.strip().partition(" ") for line in lines):
        if name.strip() == ref and not sha.startswith(("#", "^")):
            return sha
    return ""


def git_commit() -> str:
    for name in ("GIT_COMMIT", "COMMIT_SHA"):
        value = _collapse(os.getenv(name) or "")
        if value:
            return value
    return _read_git_head_commit()


def build_info_payload() -> Dict[str, Any]:
    commit = git_commit()
    return {
        "service": "dgc-desk",
        "app_version": APP_VERSION,
        "release_id": release_id(),
        "git_commit": commit,
        "git_commit_short": commit[:7] if commit else "",
    }


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob form: sha1 over b"blob <len>\\0" + data."""
    digest = hashlib.sha1()
    digest.update(f"blob {len(data)}\0".encode("ascii"))
    digest.update(data)
    return digest.hexdigest()


def file_blob_hash(path: Optional[Path]) -> str:
    if path is None or not Path(path).exists():
        return ""
    return blob_hash(Path(path).read_bytes())


def configure_logging(level: str) -> None:
    root = logging.getLogger()
    if not any(getattr(handler, "_dgc_console", False) for handler in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._dgc_console = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))


class RunLog:
    """run.log writer: header fields, config echo, mirrored log records and timings."""

    def __init__(self, out_dir: Path, verb: str) -> None:
        self.path = Path(out_dir) / RUN_LOG_NAME
        self.verb = verb
        self.timings: List[str] = []
        self._lines: List[str] = []

    def header(self, *, config_text: str, manifests: Sequence[Path] = ()) -> None:
        self._lines.append(f"verb={self.verb}")
        self._lines.append(f"release_id={release_id()}")
        self._lines.append(f"app_version={APP_VERSION}")
        for manifest in manifests:
            self._lines.append(f"manifest_blob={file_blob_hash(manifest)} {manifest}")
        self._lines.append(f"started_at_utc={datetime.now(timezone.utc).replace(microsecond=0).isoformat()}")
        self._lines.append("[config]")
        self._lines.extend(config_text.rstrip("\n").splitlines())
        self._lines.append("[log]")

    @contextmanager
    def timed(self, label: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings.append(f"{label}={time.perf_counter() - started:.3f}s")

    @contextmanager
    def capture(self) -> Iterator[None]:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(self._lines) + "\n", encoding="utf-8")
        handler = logging.FileHandler(self.path, encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        try:
            yield
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
            with self.path.open("a", encoding="utf-8") as stream:
                stream.write("[timing]\n")
                for line in self.timings:
                    stream.write(line + "\n")
