"""Repository harvesting: clone, hosting-API metadata, and file inventory."""

from __future__ import annotations

import logging
import os
import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path, PurePosixPath

import requests

from .errors import MissingToolError, TransportError
from .mining import RepoLink
from .ratelimit import TokenBucket

log = logging.getLogger(__name__)

__all__ = [
    "RepositoryRecord",
    "NotebookFile",
    "DependencyFileSet",
    "probe_and_clone",
    "fetch_repo_metadata",
    "inventory",
    "GithubApi",
]

CLONE_STATUSES = ("pending", "cloned", "not_found", "network_error",
                  "too_large", "error")

DEPENDENCY_FILENAMES = ("requirements.txt", "setup.py", "pipfile")

_NOT_FOUND_PATTERNS = re.compile(
    r"not found|does not exist|access denied or repository not exported|"
    r"could not read from remote|no such file or directory",
    re.IGNORECASE,
)
_NETWORK_PATTERNS = re.compile(
    r"could not resolve host|unable to access|failed to connect|connection "
    r"(?:refused|reset|timed out)|network is unreachable|operation timed out",
    re.IGNORECASE,
)


@dataclass
class RepositoryRecord:
    owner: str
    name: str
    canonical_url: str = ""
    accessible: bool = False
    clone_status: str = "error"
    default_branch: str = ""
    created_at: datetime | None = None
    updated_at: datetime | None = None
    pushed_at: datetime | None = None
    languages: dict[str, int] = field(default_factory=dict)
    subscribers: int = 0
    forks: int = 0
    open_issues: int = 0
    total_releases: int = 0
    release_downloads: int = 0
    license_name: str | None = None
    license_type: str | None = None
    commits_after_published: int | None = None
    commits_after_accepted: int | None = None
    commits_after_received: int | None = None
    local_path: str | None = None
    article_refs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.canonical_url:
            self.canonical_url = f"https://github.com/{self.owner}/{self.name}"
        if self.clone_status not in CLONE_STATUSES:
            raise ValueError(f"bad clone_status {self.clone_status!r}")
        if not self.accessible and self.local_path:
            raise ValueError("inaccessible repository cannot have a local path")
        for counter in (self.subscribers, self.forks, self.open_issues,
                        self.total_releases, self.release_downloads):
            if counter < 0:
                raise ValueError("counters must be nonnegative")


@dataclass
class NotebookFile:
    repo: tuple[str, str]  # (owner, name)
    relative_path: str
    size_bytes: int = 0

    def __post_init__(self):
        if not self.relative_path.endswith(".ipynb"):
            raise ValueError("notebook path must end with .ipynb")
        if ".ipynb_checkpoints" in PurePosixPath(self.relative_path).parts:
            raise ValueError("checkpoint files are excluded from inventory")
        if self.size_bytes < 0:
            raise ValueError("size must be nonnegative")


@dataclass
class DependencyFileSet:
    repo: tuple[str, str]
    has_requirements: bool = False
    has_setup: bool = False
    has_pipfile: bool = False
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        names = {PurePosixPath(p).name.lower() for p in self.paths}
        expect = (("requirements.txt" in names) == self.has_requirements
                  and ("setup.py" in names) == self.has_setup
                  and ("pipfile" in names) == self.has_pipfile)
        if not expect:
            raise ValueError("dependency flags inconsistent with paths")


def _require_git(git: str) -> str:
    path = shutil.which(git)
    if not path:
        raise MissingToolError(f"git client {git!r} not found on PATH")
    return path


def _clone_url(base: str, owner: str, name: str) -> str:
    base = base.rstrip("/")
    if base.startswith(("http://", "https://", "file://", "ssh://", "git@")):
        return f"{base}/{owner}/{name}"
    return os.path.join(base, owner, name)


def _tree_size_bytes(root: Path) -> int:
    total = 0
    for dirpath, _dirnames, filenames in os.walk(root):
        for fname in filenames:
            try:
                total += os.path.getsize(os.path.join(dirpath, fname))
            except OSError:
                pass
    return total


def _default_branch_of(dest: Path, git: str) -> str:
    try:
        out = subprocess.run(
            [git, "-C", str(dest), "rev-parse", "--abbrev-ref", "HEAD"],
            capture_output=True, text=True, timeout=30,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return ""


def probe_and_clone(link: RepoLink, workdir: str | Path,
                    git_base_url: str = "https://github.com/",
                    size_cap_bytes: int = 2 * 1024 ** 3,
                    git: str = "git",
                    clone_timeout: float = 600.0) -> RepositoryRecord:
    """Shallow-clone the default branch of one linked repository.

    Idempotent: an existing clone under ``workdir/owner__name`` is reused.
    Inaccessible repositories come back with ``accessible=False`` and a
    ``clone_status`` distinguishing not-found from network failure; clones
    larger than ``size_cap_bytes`` are removed again and marked
    ``too_large``.
    """
    git_path = _require_git(git)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    dest = workdir / f"{link.owner}__{link.name}"

    if (dest / ".git").exists():
        return RepositoryRecord(
            owner=link.owner, name=link.name, canonical_url=link.canonical_url,
            accessible=True, clone_status="cloned",
            default_branch=_default_branch_of(dest, git_path),
            local_path=str(dest),
        )

    # Clone into a staging directory and publish with an atomic rename, so
    # an interrupted run never leaves a half-checked-out tree at ``dest``
    # that a resume would mistake for a finished clone.
    staging = workdir / f".{dest.name}.partial"
    shutil.rmtree(staging, ignore_errors=True)

    url = _clone_url(git_base_url, link.owner, link.name)
    env = dict(os.environ, GIT_TERMINAL_PROMPT="0", GIT_ASKPASS="true")
    cmd = [git_path, "clone", "--depth", "1", "--single-branch", "--no-tags", url, str(staging)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True,
                              timeout=clone_timeout, env=env)
    except subprocess.TimeoutExpired:
        shutil.rmtree(staging, ignore_errors=True)
        return RepositoryRecord(owner=link.owner, name=link.name,
                                canonical_url=link.canonical_url,
                                accessible=False, clone_status="network_error")

    if proc.returncode != 0:
        shutil.rmtree(staging, ignore_errors=True)
        stderr = proc.stderr or ""
        if _NOT_FOUND_PATTERNS.search(stderr):
            status = "not_found"
        elif _NETWORK_PATTERNS.search(stderr):
            status = "network_error"
        else:
            status = "error"
        log.info("clone failed for %s (%s): %s", link.canonical_url, status,
                 stderr.strip().splitlines()[-1] if stderr.strip() else "no stderr")
        return RepositoryRecord(owner=link.owner, name=link.name,
                                canonical_url=link.canonical_url,
                                accessible=False, clone_status=status)

    if _tree_size_bytes(staging) > size_cap_bytes:
        shutil.rmtree(staging, ignore_errors=True)
        log.warning("clone of %s exceeds size cap, skipping", link.canonical_url)
        return RepositoryRecord(owner=link.owner, name=link.name,
                                canonical_url=link.canonical_url,
                                accessible=True, clone_status="too_large")

    shutil.rmtree(dest, ignore_errors=True)  # stale non-git leftovers, if any
    os.replace(staging, dest)
    return RepositoryRecord(
        owner=link.owner, name=link.name, canonical_url=link.canonical_url,
        accessible=True, clone_status="cloned",
        default_branch=_default_branch_of(dest, git_path),
        local_path=str(dest),
    )


# ---------------------------------------------------------------------------
# hosting API


def _parse_timestamp(value) -> datetime | None:
    if not value or not isinstance(value, str):
        return None
    try:
        return datetime.fromisoformat(value.replace("Z", "+00:00")).astimezone(timezone.utc)
    except ValueError:
        return None


class GithubApi:
    """Minimal REST v3-style JSON client with rate-limit-aware retries."""

    def __init__(self, base_url: str, token: str = "",
                 rate_limiter: TokenBucket | None = None, retries: int = 3,
                 timeout: float = 30.0, session: requests.Session | None = None,
                 sleep=time.sleep):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.limiter = rate_limiter or TokenBucket(3.0, burst=3)
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    def get(self, path: str, params: dict | None = None) -> requests.Response:
        url = f"{self.base_url}{path}"
        headers = {"Accept": "application/vnd.github+json"}
        if self.token:
            headers["Authorization"] = f"token {self.token}"
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(0.5 * (2 ** (attempt - 1)))
            self.limiter.acquire()
            try:
                resp = self.session.get(url, params=params, headers=headers,
                                        timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code in (403, 429) and resp.headers.get("X-RateLimit-Remaining") == "0":
                reset = resp.headers.get("X-RateLimit-Reset")
                delay = 1.0
                if reset and reset.isdigit():
                    delay = max(0.0, min(int(reset) - time.time(), 3600.0))
                log.warning("API rate limited; waiting %.0fs", delay)
                self._sleep(delay)
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"{path} returned {resp.status_code}")
                continue
            return resp
        raise TransportError(f"giving up on {path}: {last_exc}")

    def get_json(self, path: str, params: dict | None = None):
        resp = self.get(path, params)
        if resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise TransportError(f"{path} returned {resp.status_code}")
        return resp.json()

    def count_paginated(self, path: str, params: dict | None = None,
                        per_page: int = 100, max_pages: int = 50) -> int:
        """Count items across pages of a list endpoint."""
        total = 0
        page = 1
        params = dict(params or {})
        while page <= max_pages:
            params.update({"per_page": str(per_page), "page": str(page)})
            items = self.get_json(path, params)
            if not items:
                break
            total += len(items)
            if len(items) < per_page:
                break
            page += 1
        return total


def fetch_repo_metadata(record: RepositoryRecord, api: GithubApi,
                        article_dates: dict[str, date | None] | None = None
                        ) -> RepositoryRecord:
    """Enrich an accessible repository record from the hosting API.

    ``article_dates`` maps ``published`` / ``accepted`` / ``received`` to the
    referencing article's dates; each present date yields a commits-after
    count.  A 404 after a successful clone leaves metadata empty with a
    warning (the repository may have moved between clone and enrichment).
    """
    if not record.accessible:
        raise ValueError("metadata enrichment requires an accessible repository")
    base = f"/repos/{record.owner}/{record.name}"
    info = api.get_json(base)
    if info is None:
        log.warning("repository %s answered 404 during enrichment; metadata left empty",
                    record.canonical_url)
        return record

    record.default_branch = info.get("default_branch") or record.default_branch
    record.created_at = _parse_timestamp(info.get("created_at"))
    record.updated_at = _parse_timestamp(info.get("updated_at"))
    record.pushed_at = _parse_timestamp(info.get("pushed_at"))
    record.subscribers = int(info.get("subscribers_count") or 0)
    record.forks = int(info.get("forks_count") or 0)
    record.open_issues = int(info.get("open_issues_count") or 0)
    license_info = info.get("license") or {}
    record.license_name = license_info.get("name")
    record.license_type = license_info.get("spdx_id")

    languages = api.get_json(f"{base}/languages")
    if isinstance(languages, dict):
        record.languages = {str(k): int(v) for k, v in languages.items()}

    releases = api.get_json(f"{base}/releases", {"per_page": "100"})
    if isinstance(releases, list):
        record.total_releases = len(releases)
        record.release_downloads = sum(
            int(asset.get("download_count") or 0)
            for release in releases
            for asset in release.get("assets") or []
        )

    for field_name, key in (("commits_after_published", "published"),
                            ("commits_after_accepted", "accepted"),
                            ("commits_after_received", "received")):
        when = (article_dates or {}).get(key)
        if when is None:
            continue
        since = datetime(when.year, when.month, when.day, tzinfo=timezone.utc)
        count = api.count_paginated(f"{base}/commits", {"since": since.isoformat()})
        setattr(record, field_name, count)
    return record


# ---------------------------------------------------------------------------
# inventory


def inventory(record: RepositoryRecord) -> tuple[list[NotebookFile], DependencyFileSet]:
    """List notebooks and dependency files in a cloned repository.

    Checkpoint directories and the VCS metadata directory are excluded.
    Paths come back repo-relative (POSIX separators) ordered nearest-to-root
    first, which is the precedence environment planning expects.
    """
    if not record.accessible or not record.local_path:
        raise ValueError("inventory requires an accessible, cloned repository")
    root = Path(record.local_path)
    notebooks: list[NotebookFile] = []
    dep_paths: list[str] = []

    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames
                             if d not in (".git", ".ipynb_checkpoints"))
        for fname in sorted(filenames):
            full = Path(dirpath) / fname
            rel = full.relative_to(root).as_posix()
            if fname.endswith(".ipynb"):
                try:
                    size = full.stat().st_size
                except OSError as exc:
                    log.warning("unreadable notebook %s: %s", full, exc)
                    size = 0
                notebooks.append(NotebookFile(repo=(record.owner, record.name),
                                              relative_path=rel, size_bytes=size))
            elif fname.lower() == "pipfile" or fname in ("requirements.txt", "setup.py"):
                dep_paths.append(rel)

    def depth_then_name(path: str) -> tuple[int, str]:
        return (path.count("/"), path)

    notebooks.sort(key=lambda nb: depth_then_name(nb.relative_path))
    dep_paths.sort(key=depth_then_name)
    names = [PurePosixPath(p).name.lower() for p in dep_paths]
    deps = DependencyFileSet(
        repo=(record.owner, record.name),
        has_requirements="requirements.txt" in names,
        has_setup="setup.py" in names,
        has_pipfile="pipfile" in names,
        paths=dep_paths,
    )
    return notebooks, deps
