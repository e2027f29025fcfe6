"""Durable relational persistence for every pipeline entity and stage result.

One SQLite file holds the whole audit: bibliographic records, repositories,
notebooks, parsed dependencies, environment builds, executions, diffs, style
findings, classifications, and the stage journal that makes runs resumable.

Concurrency contract: a single writer (store-level mutex around the one
write connection, WAL journaling); readers open their own short-lived
connections and may run concurrently with the writer.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import sqlite3
import threading
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from .diffing import DiffItem, ReproOutcome
from .envs import DependencySpec, EnvironmentPlan, InstallResult
from .errors import IntegrityGateError
from .execution import ExecutionRecord
from .harvest import RepositoryRecord
from .mining import (ArticleRecord, AuthorRecord, JournalRecord, RepoLink,
                     normalize_orcid)
from .notebooks import CellDescriptor, ImportRecord, NotebookDescriptor
from .stylecheck import StyleReport

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES = ("mine", "harvest", "analyze", "build-envs", "execute", "diff",
          "report")

TABLES: dict[str, str] = {
    "journals": """
        CREATE TABLE IF NOT EXISTS journals (
            id INTEGER PRIMARY KEY,
            natural_key TEXT NOT NULL UNIQUE,
            issn TEXT,
            title TEXT NOT NULL DEFAULT '',
            nlm_abbrev TEXT,
            iso_abbrev TEXT,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "articles": """
        CREATE TABLE IF NOT EXISTS articles (
            id INTEGER PRIMARY KEY,
            pmc_id TEXT NOT NULL UNIQUE,
            title TEXT NOT NULL DEFAULT '',
            pubmed_id TEXT,
            doi TEXT,
            publisher_name TEXT,
            subject TEXT,
            article_type TEXT,
            journal_id INTEGER REFERENCES journals(id),
            date_received TEXT,
            date_accepted TEXT,
            date_published TEXT,
            license TEXT,
            copyright_statement TEXT,
            keywords TEXT NOT NULL DEFAULT '[]',
            mesh_terms TEXT NOT NULL DEFAULT '[]',
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "authors": """
        CREATE TABLE IF NOT EXISTS authors (
            id INTEGER PRIMARY KEY,
            natural_key TEXT NOT NULL UNIQUE,
            orcid TEXT,
            given_name TEXT NOT NULL DEFAULT '',
            family_name TEXT NOT NULL DEFAULT '',
            email TEXT,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "article_authors": """
        CREATE TABLE IF NOT EXISTS article_authors (
            id INTEGER PRIMARY KEY,
            article_id INTEGER NOT NULL REFERENCES articles(id),
            author_id INTEGER NOT NULL REFERENCES authors(id),
            position INTEGER NOT NULL,
            UNIQUE (article_id, author_id)
        )""",
    "repositories": """
        CREATE TABLE IF NOT EXISTS repositories (
            id INTEGER PRIMARY KEY,
            owner TEXT NOT NULL,
            name TEXT NOT NULL,
            canonical_url TEXT NOT NULL,
            accessible INTEGER NOT NULL DEFAULT 0,
            clone_status TEXT NOT NULL DEFAULT 'error',
            local_path TEXT,
            default_branch TEXT NOT NULL DEFAULT '',
            repo_created_at TEXT,
            repo_updated_at TEXT,
            repo_pushed_at TEXT,
            languages TEXT NOT NULL DEFAULT '{}',
            subscribers INTEGER NOT NULL DEFAULT 0,
            forks INTEGER NOT NULL DEFAULT 0,
            open_issues INTEGER NOT NULL DEFAULT 0,
            total_releases INTEGER NOT NULL DEFAULT 0,
            release_downloads INTEGER NOT NULL DEFAULT 0,
            license_name TEXT,
            license_type TEXT,
            commits_after_published INTEGER,
            commits_after_accepted INTEGER,
            commits_after_received INTEGER,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL,
            UNIQUE (owner, name)
        )""",
    "article_repositories": """
        CREATE TABLE IF NOT EXISTS article_repositories (
            id INTEGER PRIMARY KEY,
            article_id INTEGER NOT NULL REFERENCES articles(id),
            repo_id INTEGER NOT NULL REFERENCES repositories(id),
            raw_url TEXT NOT NULL DEFAULT '',
            source_location TEXT NOT NULL DEFAULT 'other',
            UNIQUE (article_id, repo_id)
        )""",
    "notebooks": """
        CREATE TABLE IF NOT EXISTS notebooks (
            id INTEGER PRIMARY KEY,
            repo_id INTEGER NOT NULL REFERENCES repositories(id),
            relative_path TEXT NOT NULL,
            size_bytes INTEGER NOT NULL DEFAULT 0,
            valid INTEGER NOT NULL DEFAULT 0,
            invalid_reason TEXT,
            nbformat INTEGER,
            kernel_name TEXT,
            language TEXT,
            language_version TEXT,
            title TEXT,
            total_cells INTEGER NOT NULL DEFAULT 0,
            code_cells INTEGER NOT NULL DEFAULT 0,
            markdown_cells INTEGER NOT NULL DEFAULT 0,
            raw_cells INTEGER NOT NULL DEFAULT 0,
            empty_cells INTEGER NOT NULL DEFAULT 0,
            cells_with_output INTEGER NOT NULL DEFAULT 0,
            max_execution_count INTEGER,
            style_skipped_cells TEXT NOT NULL DEFAULT '[]',
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL,
            UNIQUE (repo_id, relative_path)
        )""",
    "cells": """
        CREATE TABLE IF NOT EXISTS cells (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL REFERENCES notebooks(id),
            cell_index INTEGER NOT NULL,
            kind TEXT NOT NULL,
            source TEXT NOT NULL DEFAULT '',
            outputs TEXT NOT NULL DEFAULT '[]',
            execution_count INTEGER,
            UNIQUE (notebook_id, cell_index)
        )""",
    "imports": """
        CREATE TABLE IF NOT EXISTS imports (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL REFERENCES notebooks(id),
            module TEXT NOT NULL,
            form TEXT NOT NULL,
            local INTEGER NOT NULL DEFAULT 0,
            UNIQUE (notebook_id, module, form)
        )""",
    "dependency_specs": """
        CREATE TABLE IF NOT EXISTS dependency_specs (
            id INTEGER PRIMARY KEY,
            repo_id INTEGER NOT NULL REFERENCES repositories(id),
            source_file TEXT NOT NULL,
            name TEXT NOT NULL,
            extras TEXT NOT NULL DEFAULT '[]',
            version_constraints TEXT NOT NULL DEFAULT '[]',
            environment_marker TEXT,
            resolvable INTEGER NOT NULL DEFAULT 1,
            raw TEXT NOT NULL DEFAULT '',
            UNIQUE (repo_id, source_file, name, raw)
        )""",
    "environment_plans": """
        CREATE TABLE IF NOT EXISTS environment_plans (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL UNIQUE REFERENCES notebooks(id),
            env_id TEXT NOT NULL,
            python_version TEXT NOT NULL,
            fallback_default_stack INTEGER NOT NULL DEFAULT 0,
            deps TEXT NOT NULL DEFAULT '[]',
            notes TEXT NOT NULL DEFAULT '[]',
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "install_results": """
        CREATE TABLE IF NOT EXISTS install_results (
            id INTEGER PRIMARY KEY,
            env_id TEXT NOT NULL UNIQUE,
            success INTEGER NOT NULL,
            reason TEXT,
            log TEXT NOT NULL DEFAULT '',
            duration_seconds REAL NOT NULL DEFAULT 0,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "executions": """
        CREATE TABLE IF NOT EXISTS executions (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL UNIQUE REFERENCES notebooks(id),
            env_id TEXT NOT NULL,
            outcome TEXT NOT NULL,
            exception_name TEXT,
            exception_message TEXT,
            exception_cell_index INTEGER,
            total_duration_seconds REAL NOT NULL DEFAULT 0,
            started_at TEXT,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "cell_results": """
        CREATE TABLE IF NOT EXISTS cell_results (
            id INTEGER PRIMARY KEY,
            execution_id INTEGER NOT NULL REFERENCES executions(id),
            cell_index INTEGER NOT NULL,
            outputs TEXT NOT NULL DEFAULT '[]',
            duration_seconds REAL NOT NULL DEFAULT 0,
            UNIQUE (execution_id, cell_index)
        )""",
    "diffs": """
        CREATE TABLE IF NOT EXISTS diffs (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL REFERENCES notebooks(id),
            seq INTEGER NOT NULL,
            cell_index INTEGER NOT NULL,
            kind TEXT NOT NULL,
            detail TEXT NOT NULL DEFAULT '',
            UNIQUE (notebook_id, seq)
        )""",
    "style_findings": """
        CREATE TABLE IF NOT EXISTS style_findings (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL REFERENCES notebooks(id),
            seq INTEGER NOT NULL,
            cell_index INTEGER NOT NULL,
            code TEXT NOT NULL,
            line INTEGER NOT NULL,
            col INTEGER NOT NULL,
            message TEXT NOT NULL DEFAULT '',
            UNIQUE (notebook_id, seq)
        )""",
    "repro_outcomes": """
        CREATE TABLE IF NOT EXISTS repro_outcomes (
            id INTEGER PRIMARY KEY,
            notebook_id INTEGER NOT NULL UNIQUE REFERENCES notebooks(id),
            outcome_class TEXT NOT NULL,
            reason TEXT,
            exception_name TEXT,
            diff_count INTEGER NOT NULL DEFAULT 0,
            created_at TEXT NOT NULL,
            updated_at TEXT NOT NULL
        )""",
    "run_log": """
        CREATE TABLE IF NOT EXISTS run_log (
            id INTEGER PRIMARY KEY,
            run_id TEXT NOT NULL,
            stage TEXT NOT NULL,
            entity TEXT NOT NULL,
            status TEXT NOT NULL,
            detail TEXT NOT NULL DEFAULT '',
            created_at TEXT NOT NULL
        )""",
}

_META = """
    CREATE TABLE IF NOT EXISTS schema_meta (
        key TEXT PRIMARY KEY,
        value TEXT NOT NULL
    )"""

_ORCID_SHAPE = re.compile(r"^\d{4}-\d{4}-\d{4}-\d{3}[0-9X]$")

# columns excluded from cross-run state comparison (volatile by nature)
_VOLATILE_COLUMNS = frozenset({
    "id", "created_at", "updated_at", "duration_seconds",
    "total_duration_seconds", "started_at", "log",
})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _jdump(value) -> str:
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


class Store:
    def __init__(self, db_path: str | Path):
        self.db_path = str(db_path)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA foreign_keys=ON")
            self._conn.execute("PRAGMA synchronous=NORMAL")
            self._create_schema()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def _create_schema(self) -> None:
        cur = self._conn
        cur.execute(_META)
        for ddl in TABLES.values():
            cur.execute(ddl)
        cur.execute(
            "INSERT OR IGNORE INTO schema_meta (key, value) VALUES (?, ?)",
            ("schema_version", str(SCHEMA_VERSION)))
        cur.commit()

    # -- connection plumbing ------------------------------------------------

    @contextmanager
    def _write(self):
        """Serialized write transaction (the single-writer contract)."""
        with self._lock:
            try:
                yield self._conn
                self._conn.commit()
            except sqlite3.IntegrityError as exc:
                self._conn.rollback()
                raise IntegrityGateError(str(exc), f"integrity violation: {exc}") \
                    from exc
            except Exception:
                self._conn.rollback()
                raise

    @contextmanager
    def bulk_writer(self):
        """Serialized write transaction for batch importers.

        Yields the raw connection; everything executed inside commits as one
        transaction (or rolls back together on error).
        """
        with self._write() as conn:
            yield conn

    @contextmanager
    def _read(self):
        """An independent read connection; concurrent with the writer."""
        conn = sqlite3.connect(self.db_path, check_same_thread=False)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
        finally:
            conn.close()

    # -- generic natural-key upsert -----------------------------------------

    def _upsert(self, conn, table: str, natural: dict, values: dict) -> int:
        """Insert or update by natural key; updated_at bumps only on change."""
        where = " AND ".join(f"{col} = ?" for col in natural)
        row = conn.execute(
            f"SELECT * FROM {table} WHERE {where}",  # noqa: S608 — col names are ours
            tuple(natural.values())).fetchone()
        if row is None:
            now = _now()
            cols = {**natural, **values, "created_at": now, "updated_at": now}
            placeholders = ", ".join("?" for _ in cols)
            conn.execute(
                f"INSERT INTO {table} ({', '.join(cols)}) VALUES ({placeholders})",
                tuple(cols.values()))
            return conn.execute(
                f"SELECT id FROM {table} WHERE {where}",
                tuple(natural.values())).fetchone()["id"]
        changed = {col: val for col, val in values.items()
                   if row[col] != val}
        if changed:
            changed["updated_at"] = _now()
            sets = ", ".join(f"{col} = ?" for col in changed)
            conn.execute(f"UPDATE {table} SET {sets} WHERE id = ?",
                         (*changed.values(), row["id"]))
        return row["id"]

    def _replace_children(self, conn, table: str, parent_col: str,
                          parent_id: int, rows: list[dict]) -> None:
        conn.execute(f"DELETE FROM {table} WHERE {parent_col} = ?", (parent_id,))
        for row in rows:
            cols = {parent_col: parent_id, **row}
            placeholders = ", ".join("?" for _ in cols)
            conn.execute(
                f"INSERT INTO {table} ({', '.join(cols)}) VALUES ({placeholders})",
                tuple(cols.values()))

    # -- bibliographic entities ----------------------------------------------

    def upsert_journal(self, journal: JournalRecord) -> int:
        natural_key = journal.issn or f"title:{journal.title}"
        with self._write() as conn:
            return self._upsert(conn, "journals",
                                {"natural_key": natural_key},
                                {"issn": journal.issn,
                                 "title": journal.title or "",
                                 "nlm_abbrev": journal.nlm_abbrev,
                                 "iso_abbrev": journal.iso_abbrev})

    def upsert_author(self, author: AuthorRecord) -> int:
        orcid = author.orcid
        if orcid is not None:
            # invariant gate: a stored ORCID is always well-formed and
            # checksum-valid; parse-time code drops bad ones to None
            if not _ORCID_SHAPE.match(orcid) or normalize_orcid(orcid) != orcid:
                raise IntegrityGateError(
                    "authors.orcid", f"malformed ORCID {orcid!r} rejected")
            natural_key = f"orcid:{orcid}"
        else:
            natural_key = (f"name:{author.family_name}|{author.given_name}"
                           f"|{author.email or ''}")
        with self._write() as conn:
            return self._upsert(conn, "authors",
                                {"natural_key": natural_key},
                                {"orcid": orcid,
                                 "given_name": author.given_name,
                                 "family_name": author.family_name,
                                 "email": author.email})

    def upsert_article(self, article: ArticleRecord,
                       journal_id: int | None = None) -> int:
        with self._write() as conn:
            return self._upsert(conn, "articles",
                                {"pmc_id": article.pmc_id},
                                {"title": article.title or "",
                                 "pubmed_id": article.pubmed_id,
                                 "doi": article.doi,
                                 "publisher_name": article.publisher_name,
                                 "subject": article.subject,
                                 "article_type": article.article_type,
                                 "journal_id": journal_id,
                                 "date_received": _iso(article.date_received),
                                 "date_accepted": _iso(article.date_accepted),
                                 "date_published": _iso(article.date_published),
                                 "license": article.license,
                                 "copyright_statement": article.copyright_statement,
                                 "keywords": _jdump(article.keywords),
                                 "mesh_terms": _jdump(article.mesh_terms)})

    def link_article_author(self, article_id: int, author_id: int,
                            position: int) -> None:
        with self._write() as conn:
            conn.execute(
                """INSERT INTO article_authors (article_id, author_id, position)
                   VALUES (?, ?, ?)
                   ON CONFLICT (article_id, author_id)
                   DO UPDATE SET position = excluded.position""",
                (article_id, author_id, position))

    def store_article(self, article: ArticleRecord) -> int:
        """Convenience: journal + article + authors in natural order."""
        journal_id = (self.upsert_journal(article.journal)
                      if article.journal else None)
        article_id = self.upsert_article(article, journal_id)
        for position, author in enumerate(article.authors):
            author_id = self.upsert_author(author)
            self.link_article_author(article_id, author_id, position)
        return article_id

    # -- repositories ---------------------------------------------------------

    def upsert_repository(self, repo: RepositoryRecord) -> int:
        with self._write() as conn:
            return self._upsert(conn, "repositories",
                                {"owner": repo.owner, "name": repo.name},
                                {"canonical_url": repo.canonical_url,
                                 "accessible": int(repo.accessible),
                                 "clone_status": repo.clone_status,
                                 "local_path": repo.local_path,
                                 "default_branch": repo.default_branch,
                                 "repo_created_at": _iso(repo.created_at),
                                 "repo_updated_at": _iso(repo.updated_at),
                                 "repo_pushed_at": _iso(repo.pushed_at),
                                 "languages": _jdump(repo.languages),
                                 "subscribers": repo.subscribers,
                                 "forks": repo.forks,
                                 "open_issues": repo.open_issues,
                                 "total_releases": repo.total_releases,
                                 "release_downloads": repo.release_downloads,
                                 "license_name": repo.license_name,
                                 "license_type": repo.license_type,
                                 "commits_after_published": repo.commits_after_published,
                                 "commits_after_accepted": repo.commits_after_accepted,
                                 "commits_after_received": repo.commits_after_received})

    def link_article_repository(self, article_id: int, repo_id: int,
                                link: RepoLink) -> None:
        with self._write() as conn:
            conn.execute(
                """INSERT INTO article_repositories
                   (article_id, repo_id, raw_url, source_location)
                   VALUES (?, ?, ?, ?)
                   ON CONFLICT (article_id, repo_id) DO UPDATE SET
                   raw_url = excluded.raw_url,
                   source_location = excluded.source_location""",
                (article_id, repo_id, link.raw_url, link.source_location))

    # -- notebooks ------------------------------------------------------------

    def upsert_notebook(self, repo_id: int, relative_path: str,
                        size_bytes: int = 0,
                        descriptor: NotebookDescriptor | None = None,
                        invalid_reason: str | None = None,
                        style_skipped_cells: list[int] | None = None) -> int:
        values: dict = {"size_bytes": size_bytes,
                        "valid": int(descriptor is not None),
                        "invalid_reason": invalid_reason}
        if descriptor is not None:
            values.update(
                nbformat=descriptor.nbformat_major,
                kernel_name=descriptor.kernel_name,
                language=descriptor.language,
                language_version=descriptor.language_version,
                title=descriptor.title,
                total_cells=descriptor.total_cells,
                code_cells=descriptor.code_cells,
                markdown_cells=descriptor.markdown_cells,
                raw_cells=descriptor.raw_cells,
                empty_cells=descriptor.empty_cells,
                cells_with_output=descriptor.code_cells_with_output,
                max_execution_count=descriptor.max_execution_count)
        if style_skipped_cells is not None:
            values["style_skipped_cells"] = _jdump(style_skipped_cells)
        with self._write() as conn:
            return self._upsert(conn, "notebooks",
                                {"repo_id": repo_id,
                                 "relative_path": relative_path},
                                values)

    def replace_cells(self, notebook_id: int, cells: list[CellDescriptor]) -> None:
        rows = [{"cell_index": cell.index, "kind": cell.kind,
                 "source": cell.source,
                 "outputs": _jdump([o.to_json() for o in cell.outputs]),
                 "execution_count": cell.execution_count}
                for cell in cells]
        with self._write() as conn:
            self._replace_children(conn, "cells", "notebook_id", notebook_id, rows)

    def replace_imports(self, notebook_id: int,
                        records: list[ImportRecord]) -> None:
        rows = [{"module": rec.module, "form": rec.form,
                 "local": int(rec.locality == "local")}
                for rec in records]
        with self._write() as conn:
            self._replace_children(conn, "imports", "notebook_id", notebook_id, rows)

    def replace_dependency_specs(self, repo_id: int,
                                 specs: list[DependencySpec]) -> None:
        rows = [{"source_file": s.source_file, "name": s.name,
                 "extras": _jdump(s.extras),
                 "version_constraints": _jdump(s.version_constraints),
                 "environment_marker": s.environment_marker,
                 "resolvable": int(s.resolvable), "raw": s.raw}
                for s in specs]
        with self._write() as conn:
            self._replace_children(conn, "dependency_specs", "repo_id",
                                   repo_id, rows)

    # -- environments / executions --------------------------------------------

    def upsert_environment_plan(self, notebook_id: int,
                                plan: EnvironmentPlan) -> int:
        with self._write() as conn:
            return self._upsert(conn, "environment_plans",
                                {"notebook_id": notebook_id},
                                {"env_id": plan.env_id,
                                 "python_version": plan.python_version,
                                 "fallback_default_stack":
                                     int(plan.fallback_default_stack),
                                 "deps": _jdump([s.requirement_line()
                                                 for s in plan.deps]),
                                 "notes": _jdump(plan.notes)})

    def upsert_install_result(self, result: InstallResult) -> int:
        with self._write() as conn:
            return self._upsert(conn, "install_results",
                                {"env_id": result.plan.env_id},
                                {"success": int(result.success),
                                 "reason": result.reason,
                                 "log": result.log,
                                 "duration_seconds": result.duration_seconds})

    def upsert_execution(self, notebook_id: int, record: ExecutionRecord) -> int:
        with self._write() as conn:
            execution_id = self._upsert(
                conn, "executions", {"notebook_id": notebook_id},
                {"env_id": record.env_id,
                 "outcome": record.outcome,
                 "exception_name": record.exception_name,
                 "exception_message": record.exception_message,
                 "exception_cell_index": record.exception_cell_index,
                 "total_duration_seconds": record.total_duration_seconds,
                 "started_at": record.started_at})
            rows = [{"cell_index": r.cell_index,
                     "outputs": _jdump([o.to_json() for o in r.outputs]),
                     "duration_seconds": r.duration_seconds}
                    for r in record.cell_results]
            self._replace_children(conn, "cell_results", "execution_id",
                                   execution_id, rows)
            return execution_id

    def replace_diffs(self, notebook_id: int, diffs: list[DiffItem]) -> None:
        rows = [{"seq": seq, "cell_index": d.cell_index, "kind": d.kind,
                 "detail": d.detail}
                for seq, d in enumerate(diffs)]
        with self._write() as conn:
            self._replace_children(conn, "diffs", "notebook_id", notebook_id, rows)

    def replace_style_findings(self, notebook_id: int,
                               report: StyleReport) -> None:
        rows = [{"seq": seq, "cell_index": f.cell_index, "code": f.code,
                 "line": f.line, "col": f.column, "message": f.message}
                for seq, f in enumerate(report.findings)]
        with self._write() as conn:
            self._replace_children(conn, "style_findings", "notebook_id",
                                   notebook_id, rows)

    def upsert_repro_outcome(self, notebook_id: int,
                             outcome: ReproOutcome) -> int:
        with self._write() as conn:
            return self._upsert(conn, "repro_outcomes",
                                {"notebook_id": notebook_id},
                                {"outcome_class": outcome.outcome_class,
                                 "reason": outcome.reason,
                                 "exception_name": outcome.exception_name,
                                 "diff_count": outcome.diff_count})

    # -- stage journal ----------------------------------------------------------

    def begin_run(self, run_id: str) -> None:
        with self._write() as conn:
            conn.execute(
                """INSERT INTO run_log (run_id, stage, entity, status, detail,
                                        created_at)
                   VALUES (?, 'run', ?, 'started', '', ?)""",
                (run_id, run_id, _now()))

    def log_stage(self, run_id: str, stage: str, entity: str, status: str,
                  detail: str = "") -> None:
        if status not in ("pending", "done", "failed"):
            raise ValueError(f"bad stage status {status!r}")
        with self._write() as conn:
            conn.execute(
                """INSERT INTO run_log (run_id, stage, entity, status, detail,
                                        created_at)
                   VALUES (?, ?, ?, ?, ?, ?)""",
                (run_id, stage, entity, status, detail, _now()))

    def run_exists(self, run_id: str) -> bool:
        with self._read() as conn:
            row = conn.execute(
                "SELECT 1 FROM run_log WHERE run_id = ? LIMIT 1",
                (run_id,)).fetchone()
        return row is not None

    def stage_status(self, run_id: str) -> dict[str, dict[str, str]]:
        """Latest status per (stage, entity) for a run; drives skip-if-done."""
        with self._read() as conn:
            if conn.execute("SELECT 1 FROM run_log WHERE run_id = ? LIMIT 1",
                            (run_id,)).fetchone() is None:
                raise KeyError(f"unknown run id {run_id!r}")
            rows = conn.execute(
                """SELECT stage, entity, status FROM run_log
                   WHERE run_id = ? AND stage != 'run'
                   ORDER BY id""", (run_id,)).fetchall()
        status: dict[str, dict[str, str]] = {}
        for row in rows:
            status.setdefault(row["stage"], {})[row["entity"]] = row["status"]
        return status

    def stage_done(self, run_id: str, stage: str) -> bool:
        """A stage counts as done when its completion marker is logged."""
        try:
            return self.stage_status(run_id).get(stage, {}).get("*") == "done"
        except KeyError:
            return False

    # -- queries ----------------------------------------------------------------

    def query(self, sql: str, params: tuple = ()) -> list[sqlite3.Row]:
        with self._read() as conn:
            return conn.execute(sql, params).fetchall()

    def scalar(self, sql: str, params: tuple = ()):
        rows = self.query(sql, params)
        return rows[0][0] if rows else None

    # -- export / comparison ------------------------------------------------------

    def export_table(self, table: str, fmt: str, out_path: str | Path) -> Path:
        if table not in TABLES:
            raise ValueError(f"unknown table {table!r}")
        if fmt not in ("json", "csv"):
            raise ValueError(f"unknown export format {fmt!r}")
        with self._read() as conn:
            rows = conn.execute(f"SELECT * FROM {table} ORDER BY id").fetchall()
            columns = [d[0] for d in conn.execute(
                f"SELECT * FROM {table} LIMIT 0").description]
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            payload = [dict(zip(columns, tuple(row))) for row in rows]
            out.write_text(_jdump(payload) + "\n", encoding="utf-8")
        else:
            with out.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(columns)
                for row in rows:
                    writer.writerow(tuple(row))
        return out

    def comparable_dump(self) -> dict[str, list[tuple]]:
        """Cross-run-comparable state: volatile columns stripped, surrogate
        ids replaced by natural keys, rows sorted.  The run_log journal is an
        audit trail, not state, and is excluded; so are raw rerun output
        payloads, logs, and exception messages — run-local evidence whose
        content (memory addresses, timestamps) legitimately varies between
        otherwise identical runs.  The stable derivations of that evidence
        (diff items, outcome classes) are what get compared.
        """
        joins = {
            "journals": ("SELECT natural_key, issn, title, nlm_abbrev,"
                         " iso_abbrev FROM journals"),
            "articles": ("SELECT a.pmc_id, a.title, a.pubmed_id, a.doi,"
                         " a.subject, j.natural_key, a.date_published,"
                         " a.license, a.keywords, a.mesh_terms"
                         " FROM articles a LEFT JOIN journals j"
                         " ON a.journal_id = j.id"),
            "authors": ("SELECT natural_key, orcid, given_name, family_name,"
                        " email FROM authors"),
            "article_authors": ("SELECT ar.pmc_id, au.natural_key, aa.position"
                                " FROM article_authors aa"
                                " JOIN articles ar ON aa.article_id = ar.id"
                                " JOIN authors au ON aa.author_id = au.id"),
            "repositories": ("SELECT owner, name, accessible, clone_status,"
                             " default_branch, languages, subscribers, forks,"
                             " open_issues, total_releases, release_downloads,"
                             " license_name, license_type,"
                             " commits_after_published, commits_after_accepted,"
                             " commits_after_received FROM repositories"),
            "article_repositories": ("SELECT ar.pmc_id, r.owner, r.name,"
                                     " l.raw_url, l.source_location"
                                     " FROM article_repositories l"
                                     " JOIN articles ar ON l.article_id = ar.id"
                                     " JOIN repositories r ON l.repo_id = r.id"),
            "notebooks": ("SELECT r.owner, r.name, n.relative_path,"
                          " n.size_bytes, n.valid, n.invalid_reason,"
                          " n.nbformat, n.kernel_name, n.language,"
                          " n.language_version, n.total_cells, n.code_cells,"
                          " n.markdown_cells, n.raw_cells, n.empty_cells,"
                          " n.cells_with_output, n.max_execution_count,"
                          " n.style_skipped_cells"
                          " FROM notebooks n JOIN repositories r"
                          " ON n.repo_id = r.id"),
            "cells": ("SELECT r.owner, r.name, n.relative_path, c.cell_index,"
                      " c.kind, c.source, c.outputs, c.execution_count"
                      " FROM cells c JOIN notebooks n ON c.notebook_id = n.id"
                      " JOIN repositories r ON n.repo_id = r.id"),
            "imports": ("SELECT r.owner, r.name, n.relative_path, i.module,"
                        " i.form, i.local FROM imports i"
                        " JOIN notebooks n ON i.notebook_id = n.id"
                        " JOIN repositories r ON n.repo_id = r.id"),
            "dependency_specs": ("SELECT r.owner, r.name, d.source_file,"
                                 " d.name, d.extras, d.version_constraints,"
                                 " d.environment_marker, d.resolvable, d.raw"
                                 " FROM dependency_specs d JOIN repositories r"
                                 " ON d.repo_id = r.id"),
            "environment_plans": ("SELECT r.owner, r.name, n.relative_path,"
                                  " p.env_id, p.python_version,"
                                  " p.fallback_default_stack, p.deps"
                                  " FROM environment_plans p"
                                  " JOIN notebooks n ON p.notebook_id = n.id"
                                  " JOIN repositories r ON n.repo_id = r.id"),
            "install_results": ("SELECT env_id, success, reason"
                                " FROM install_results"),
            "executions": ("SELECT r.owner, r.name, n.relative_path, e.env_id,"
                           " e.outcome, e.exception_name,"
                           " e.exception_cell_index"
                           " FROM executions e JOIN notebooks n"
                           " ON e.notebook_id = n.id"
                           " JOIN repositories r ON n.repo_id = r.id"),
            "cell_results": ("SELECT r.owner, r.name, n.relative_path,"
                             " c.cell_index FROM cell_results c"
                             " JOIN executions e ON c.execution_id = e.id"
                             " JOIN notebooks n ON e.notebook_id = n.id"
                             " JOIN repositories r ON n.repo_id = r.id"),
            "diffs": ("SELECT r.owner, r.name, n.relative_path, d.seq,"
                      " d.cell_index, d.kind, d.detail FROM diffs d"
                      " JOIN notebooks n ON d.notebook_id = n.id"
                      " JOIN repositories r ON n.repo_id = r.id"),
            "style_findings": ("SELECT r.owner, r.name, n.relative_path,"
                               " s.seq, s.cell_index, s.code, s.line, s.col"
                               " FROM style_findings s"
                               " JOIN notebooks n ON s.notebook_id = n.id"
                               " JOIN repositories r ON n.repo_id = r.id"),
            "repro_outcomes": ("SELECT r.owner, r.name, n.relative_path,"
                               " o.outcome_class, o.reason, o.exception_name,"
                               " o.diff_count FROM repro_outcomes o"
                               " JOIN notebooks n ON o.notebook_id = n.id"
                               " JOIN repositories r ON n.repo_id = r.id"),
        }
        dump: dict[str, list[tuple]] = {}
        with self._read() as conn:
            for table, sql in joins.items():
                rows = [tuple(row) for row in conn.execute(sql).fetchall()]
                dump[table] = sorted(rows, key=lambda r: tuple(
                    (x is None, x) for x in r))
        return dump


def _iso(value) -> str | None:
    if value is None:
        return None
    if isinstance(value, str):
        return value
    return value.isoformat()
