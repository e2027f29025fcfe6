"""Aggregate statistics over a finished audit: funnel, groups, histograms,
energy/carbon footprint, and machine-readable report files.

Percentage bases are mixed deliberately and documented per field: install
and execution rates are fractions of attempted notebooks, the exception rate
is a fraction of executed notebooks, and the identical/different splits are
fractions of attempted notebooks.  ``PERCENT_BASES`` is the authoritative
map.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields as dc_fields
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from .store import Store

log = logging.getLogger(__name__)

# kg CO2e one average tree sequesters per month (11 kg per tree-year)
KG_CO2E_PER_TREE_MONTH = 11.0 / 12.0

# numerator field → denominator field for percentage reporting
PERCENT_BASES = {
    "repos_accessible": "repos_linked",
    "repos_with_notebooks": "repos_accessible",
    "notebooks_python": "notebooks_total",
    "notebooks_attempted": "notebooks_total",
    "installs_failed": "notebooks_attempted",
    "executed": "notebooks_attempted",
    "exceptions": "executed",
    "other_failures": "executed",
    "success_no_error": "notebooks_attempted",
    "success_identical": "notebooks_attempted",
    "success_different": "notebooks_attempted",
}


def percent(numerator: int, denominator: int) -> float | None:
    """Round-half-even percentage with 2 decimals; None when undefined."""
    if denominator == 0:
        return None
    value = Decimal(numerator) * 100 / Decimal(denominator)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


@dataclass
class FunnelReport:
    articles: int = 0
    repos_linked: int = 0
    repos_accessible: int = 0
    repos_with_notebooks: int = 0
    notebooks_total: int = 0
    notebooks_python: int = 0
    notebooks_attempted: int = 0
    installs_failed: int = 0
    executed: int = 0
    exceptions: int = 0
    other_failures: int = 0  # timeout + kernel_start_failure
    success_no_error: int = 0
    success_identical: int = 0
    success_different: int = 0
    percentages: dict[str, float | None] = field(default_factory=dict)
    undefined_percentages: list[str] = field(default_factory=list)

    def __post_init__(self):
        counts = {f.name: getattr(self, f.name) for f in dc_fields(self)
                  if f.type == "int"}
        for name, value in counts.items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        # funnel identities — enforced, not assumed
        if self.notebooks_attempted != self.installs_failed + self.executed:
            raise ValueError("attempted != installs_failed + executed")
        if self.executed != (self.exceptions + self.other_failures
                             + self.success_no_error):
            raise ValueError(
                "executed != exceptions + other_failures + success_no_error")
        if self.success_no_error != self.success_identical + self.success_different:
            raise ValueError("success_no_error != identical + different")
        if not self.percentages:
            self.percentages = {
                name: percent(counts[name], counts[base])
                for name, base in PERCENT_BASES.items()}
            self.undefined_percentages = sorted(
                name for name, value in self.percentages.items()
                if value is None)

    def to_json(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dc_fields(self)
               if f.type == "int"}
        out["percentages"] = self.percentages
        out["undefined_percentages"] = self.undefined_percentages
        return out


def funnel_report(store: Store) -> FunnelReport:
    def one(sql: str, params: tuple = ()) -> int:
        return int(store.scalar(sql, params) or 0)

    def outcome_count(*classes: str) -> int:
        marks = ",".join("?" for _ in classes)
        return one(f"SELECT COUNT(*) FROM repro_outcomes"
                   f" WHERE outcome_class IN ({marks})", classes)

    attempted = one("SELECT COUNT(*) FROM repro_outcomes"
                    " WHERE outcome_class != 'not_attempted'")
    installs_failed = outcome_count("install_failed")
    exceptions = outcome_count("exception")
    other_failures = outcome_count("timeout", "kernel_start_failure")
    identical = outcome_count("success_identical")
    different = outcome_count("success_different")

    return FunnelReport(
        articles=one("SELECT COUNT(*) FROM articles"),
        repos_linked=one("SELECT COUNT(*) FROM repositories"),
        repos_accessible=one(
            "SELECT COUNT(*) FROM repositories WHERE accessible = 1"),
        repos_with_notebooks=one(
            "SELECT COUNT(DISTINCT repo_id) FROM notebooks"),
        notebooks_total=one("SELECT COUNT(*) FROM notebooks"),
        notebooks_python=one(
            "SELECT COUNT(*) FROM notebooks WHERE valid = 1"
            " AND language = 'python'"),
        notebooks_attempted=attempted,
        installs_failed=installs_failed,
        executed=attempted - installs_failed,
        exceptions=exceptions,
        other_failures=other_failures,
        success_no_error=identical + different,
        success_identical=identical,
        success_different=different)


@dataclass
class GroupStats:
    group: str
    n: int
    mean_total_cells: float
    mean_code_cells: float
    mean_markdown_cells: float
    mean_empty_cells: float
    markdown_code_ratio: float  # mean markdown cells / mean code cells
    mean_diffs: float
    mean_execution_seconds: float
    seconds_per_code_cell: float  # mean execution time / mean code cells
    notebooks_with_setup: int = 0
    notebooks_with_requirements: int = 0
    notebooks_with_pipfile: int = 0

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


def group_comparison(store: Store) -> dict[str, GroupStats]:
    """Means per group for the different-vs-identical comparison table."""
    out: dict[str, GroupStats] = {}
    for group, outcome_class in (("different", "success_different"),
                                 ("identical", "success_identical")):
        rows = store.query(
            """SELECT n.id AS nid, n.total_cells, n.code_cells,
                      n.markdown_cells, n.empty_cells, o.diff_count,
                      COALESCE(e.total_duration_seconds, 0) AS duration,
                      n.repo_id
               FROM repro_outcomes o
               JOIN notebooks n ON o.notebook_id = n.id
               LEFT JOIN executions e ON e.notebook_id = n.id
               WHERE o.outcome_class = ?""", (outcome_class,))
        if not rows:
            raise ValueError(
                f"group comparison needs >=1 notebook in group {group!r}")
        n = len(rows)

        def mean(key: str) -> float:
            return sum(row[key] for row in rows) / n

        def dep_count(source: str) -> int:
            repo_ids = {row["repo_id"] for row in rows}
            marks = ",".join("?" for _ in repo_ids)
            with_dep = {r[0] for r in store.query(
                f"SELECT DISTINCT repo_id FROM dependency_specs"
                f" WHERE source_file = ? AND repo_id IN ({marks})",
                (source, *repo_ids))}
            return sum(1 for row in rows if row["repo_id"] in with_dep)

        mean_code = mean("code_cells")
        mean_md = mean("markdown_cells")
        mean_time = mean("duration")
        out[group] = GroupStats(
            group=group, n=n,
            mean_total_cells=mean("total_cells"),
            mean_code_cells=mean_code,
            mean_markdown_cells=mean_md,
            mean_empty_cells=mean("empty_cells"),
            markdown_code_ratio=(mean_md / mean_code) if mean_code else 0.0,
            mean_diffs=mean("diff_count"),
            mean_execution_seconds=mean_time,
            seconds_per_code_cell=(mean_time / mean_code) if mean_code else 0.0,
            notebooks_with_setup=dep_count("setup"),
            notebooks_with_requirements=dep_count("requirements"),
            notebooks_with_pipfile=dep_count("pipfile"))
    return out


@dataclass
class ExceptionHistogram:
    overall: list[tuple[str, int]] = field(default_factory=list)
    by_year: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    by_journal: dict[str, list[tuple[str, int]]] = field(default_factory=dict)


def _ordered(counter: dict[str, int]) -> list[tuple[str, int]]:
    """Descending by count; ties alphabetical."""
    return sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))


def exception_histogram(store: Store) -> ExceptionHistogram:
    # Attribute each notebook to the first article linked to its repo so a
    # repo shared by several articles still counts each exception once.
    rows = store.query(
        """SELECT o.exception_name AS name,
                  substr(a.date_published, 1, 4) AS year,
                  j.title AS journal
           FROM repro_outcomes o
           JOIN notebooks n ON o.notebook_id = n.id
           LEFT JOIN (SELECT repo_id, MIN(article_id) AS article_id
                      FROM article_repositories GROUP BY repo_id) ar
                  ON ar.repo_id = n.repo_id
           LEFT JOIN articles a ON ar.article_id = a.id
           LEFT JOIN journals j ON a.journal_id = j.id
           WHERE o.outcome_class = 'exception'""")
    overall: dict[str, int] = {}
    by_year: dict[str, dict[str, int]] = {}
    by_journal: dict[str, dict[str, int]] = {}
    for row in rows:
        name = row["name"] or "Exception"
        overall[name] = overall.get(name, 0) + 1
        year_bucket = by_year.setdefault(row["year"] or "unknown", {})
        year_bucket[name] = year_bucket.get(name, 0) + 1
        journal_bucket = by_journal.setdefault(row["journal"] or "unknown", {})
        journal_bucket[name] = journal_bucket.get(name, 0) + 1
    return ExceptionHistogram(
        overall=_ordered(overall),
        by_year={year: _ordered(names) for year, names in sorted(by_year.items())},
        by_journal={j: _ordered(names) for j, names in sorted(by_journal.items())})


@dataclass
class FootprintEstimate:
    runtime_hours: float
    n_cores: int
    power_per_core_watts: float
    core_usage_fraction: float
    memory_gb: float
    power_per_gb_watts: float
    pue: float
    carbon_intensity_kg_per_kwh: float
    energy_kwh: float = 0.0
    carbon_kg: float = 0.0
    tree_months: float = 0.0

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


def estimate_footprint(runtime_hours: float, n_cores: int,
                       power_per_core_watts: float, core_usage_fraction: float,
                       memory_gb: float, power_per_gb_watts: float, pue: float,
                       carbon_intensity_kg_per_kwh: float) -> FootprintEstimate:
    """Energy/carbon estimate following the green-computing methodology:

        energy_kwh = hours × (cores×W/core×usage + GB×W/GB) × PUE / 1000
        carbon_kg  = energy_kwh × grid intensity
        tree_months = carbon_kg / (11/12 kg per tree-month)

    Linear in runtime by construction.
    """
    for name, value in (("runtime_hours", runtime_hours), ("n_cores", n_cores),
                        ("power_per_core_watts", power_per_core_watts),
                        ("core_usage_fraction", core_usage_fraction),
                        ("memory_gb", memory_gb),
                        ("power_per_gb_watts", power_per_gb_watts),
                        ("pue", pue),
                        ("carbon_intensity", carbon_intensity_kg_per_kwh)):
        if value < 0:
            raise ValueError(f"{name} must be nonnegative")
    draw_watts = (n_cores * power_per_core_watts * core_usage_fraction
                  + memory_gb * power_per_gb_watts)
    energy_kwh = runtime_hours * draw_watts * pue / 1000.0
    carbon_kg = energy_kwh * carbon_intensity_kg_per_kwh
    tree_months = carbon_kg / KG_CO2E_PER_TREE_MONTH
    return FootprintEstimate(
        runtime_hours=runtime_hours, n_cores=n_cores,
        power_per_core_watts=power_per_core_watts,
        core_usage_fraction=core_usage_fraction, memory_gb=memory_gb,
        power_per_gb_watts=power_per_gb_watts, pue=pue,
        carbon_intensity_kg_per_kwh=carbon_intensity_kg_per_kwh,
        energy_kwh=energy_kwh, carbon_kg=carbon_kg, tree_months=tree_months)


# ---------------------------------------------------------------------------
# figure/table-equivalent data extracts


def language_timeline(store: Store) -> list[dict]:
    """Notebook count per (publication year, language)."""
    rows = store.query(
        """SELECT COALESCE(substr(a.date_published, 1, 4), 'unknown') AS year,
                  COALESCE(n.language, 'unknown') AS language,
                  COUNT(DISTINCT n.id) AS count
           FROM notebooks n
           LEFT JOIN article_repositories ar ON ar.repo_id = n.repo_id
           LEFT JOIN articles a ON ar.article_id = a.id
           GROUP BY year, language ORDER BY year, language""")
    return [dict(row) for row in rows]


def version_timeline(store: Store) -> list[dict]:
    """Python-notebook count per (publication year, language version)."""
    rows = store.query(
        """SELECT COALESCE(substr(a.date_published, 1, 4), 'unknown') AS year,
                  COALESCE(n.language_version, 'unknown') AS version,
                  COUNT(DISTINCT n.id) AS count
           FROM notebooks n
           LEFT JOIN article_repositories ar ON ar.repo_id = n.repo_id
           LEFT JOIN articles a ON ar.article_id = a.id
           WHERE n.language = 'python'
           GROUP BY year, version ORDER BY year, version""")
    return [dict(row) for row in rows]


def naming_stats(store: Store) -> dict:
    """Notebook title-length distribution and name-quality counts."""
    from .notebooks import analyze_name

    rows = store.query(
        "SELECT title FROM notebooks WHERE title IS NOT NULL AND title != ''")
    lengths: dict[int, int] = {}
    posix = windows = untitled = copies = tests = 0
    for row in rows:
        title = row["title"]
        lengths[len(title)] = lengths.get(len(title), 0) + 1
        info = analyze_name(title)
        posix += info.posix_portable
        windows += info.windows_valid
        untitled += info.is_untitled
        copies += info.has_copy
        tests += info.has_test
    return {
        "notebooks_titled": len(rows),
        "length_histogram": [
            {"length": k, "count": v} for k, v in sorted(lengths.items())],
        "posix_portable": posix,
        "windows_valid": windows,
        "untitled": untitled,
        "copy_in_name": copies,
        "test_in_name": tests,
    }


def module_top(store: Store, limit: int = 30) -> list[dict]:
    """Most-imported external modules across all notebooks."""
    rows = store.query(
        """SELECT module, COUNT(DISTINCT notebook_id) AS count
           FROM imports WHERE local = 0
           GROUP BY module ORDER BY count DESC, module ASC LIMIT ?""",
        (limit,))
    return [dict(row) for row in rows]


def style_code_counts(store: Store) -> list[dict]:
    rows = store.query(
        """SELECT code, COUNT(*) AS count FROM style_findings
           GROUP BY code ORDER BY count DESC, code ASC""")
    return [dict(row) for row in rows]


def emit_report(store: Store, fmt: str, out_dir: str | Path,
                footprint: FootprintEstimate | None = None) -> list[Path]:
    """Write one file per table/figure-equivalent; returns written paths."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def dump(name: str, payload, columns: list[str] | None = None,
             rows: list | None = None) -> None:
        path = out / f"{name}.{fmt}"
        if fmt == "json":
            path.write_text(json.dumps(payload, ensure_ascii=False, indent=2,
                                       sort_keys=True) + "\n", encoding="utf-8")
        else:
            with path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(columns or [])
                for row in rows or []:
                    writer.writerow(row)
        written.append(path)

    funnel = funnel_report(store)
    dump("funnel", funnel.to_json(),
         columns=["field", "count", "percent"],
         rows=[(name, count,
                funnel.percentages.get(name, ""))
               for name, count in funnel.to_json().items()
               if isinstance(count, int)])

    histogram = exception_histogram(store)
    dump("exception_histogram",
         {"overall": histogram.overall,
          "by_year": histogram.by_year,
          "by_journal": histogram.by_journal},
         columns=["scope", "key", "exception", "count"],
         rows=([("overall", "", name, count)
                for name, count in histogram.overall]
               + [("year", year, name, count)
                  for year, items in histogram.by_year.items()
                  for name, count in items]
               + [("journal", journal, name, count)
                  for journal, items in histogram.by_journal.items()
                  for name, count in items]))

    try:
        groups = group_comparison(store)
        group_rows = [g.to_json() for g in groups.values()]
        dump("group_comparison", group_rows,
             columns=list(group_rows[0].keys()),
             rows=[tuple(g.values()) for g in group_rows])
    except ValueError as exc:
        log.info("group comparison skipped: %s", exc)

    languages = language_timeline(store)
    dump("language_by_year", languages, columns=["year", "language", "count"],
         rows=[(r["year"], r["language"], r["count"]) for r in languages])

    versions = version_timeline(store)
    dump("python_version_by_year", versions,
         columns=["year", "version", "count"],
         rows=[(r["year"], r["version"], r["count"]) for r in versions])

    names = naming_stats(store)
    dump("naming_stats", names,
         columns=["metric", "value"],
         rows=([(k, v) for k, v in names.items() if not isinstance(v, list)]
               + [("length_" + str(e["length"]), e["count"])
                  for e in names["length_histogram"]]))

    modules = module_top(store)
    dump("module_top", modules, columns=["module", "count"],
         rows=[(r["module"], r["count"]) for r in modules])

    styles = style_code_counts(store)
    dump("style_code_counts", styles, columns=["code", "count"],
         rows=[(r["code"], r["count"]) for r in styles])

    if footprint is not None:
        dump("footprint", footprint.to_json(),
             columns=["field", "value"],
             rows=list(footprint.to_json().items()))
    return written


# ---------------------------------------------------------------------------
# archived-dataset importer (golden replay)

ARCHIVE_COLUMNS = [
    "repo_owner", "repo_name", "relative_path", "language",
    "language_version", "outcome_class", "exception_name", "diff_count",
    "total_cells", "code_cells", "markdown_cells", "empty_cells",
    "total_duration_seconds", "has_requirements", "has_setup", "has_pipfile",
    "year", "journal",
]


def import_archive(csv_path: str | Path, store: Store) -> int:
    """Load an archived per-notebook result dump into the live schema.

    The archive format is one CSV row per notebook (see ARCHIVE_COLUMNS);
    just enough state is reconstructed for funnel_report, group_comparison,
    and exception_histogram to run over it.  Returns rows imported.
    """
    path = Path(csv_path)
    now_rows = 0
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ARCHIVE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"archive missing columns: {missing}")

        with store.bulk_writer() as conn:  # batch import: one transaction
            now = "1970-01-01T00:00:00+00:00"
            repo_ids: dict[tuple[str, str], int] = {}
            journal_ids: dict[str, int] = {}
            dep_done: set[tuple[int, str]] = set()
            for row in reader:
                key = (row["repo_owner"], row["repo_name"])
                repo_id = repo_ids.get(key)
                if repo_id is None:
                    conn.execute(
                        """INSERT INTO repositories (owner, name, canonical_url,
                           accessible, clone_status, created_at, updated_at)
                           VALUES (?, ?, ?, 1, 'cloned', ?, ?)
                           ON CONFLICT (owner, name) DO UPDATE SET owner=owner
                           """, (*key,
                                 f"https://github.com/{key[0]}/{key[1]}",
                                 now, now))
                    repo_id = conn.execute(
                        "SELECT id FROM repositories WHERE owner=? AND name=?",
                        key).fetchone()["id"]
                    repo_ids[key] = repo_id
                    # one synthetic article per repo carries year + journal
                    journal = row["journal"] or "unknown"
                    journal_id = journal_ids.get(journal)
                    if journal_id is None:
                        conn.execute(
                            """INSERT OR IGNORE INTO journals
                               (natural_key, title, created_at, updated_at)
                               VALUES (?, ?, ?, ?)""",
                            (f"title:{journal}", journal, now, now))
                        journal_id = conn.execute(
                            "SELECT id FROM journals WHERE natural_key = ?",
                            (f"title:{journal}",)).fetchone()["id"]
                        journal_ids[journal] = journal_id
                    year = row["year"] or "1970"
                    conn.execute(
                        """INSERT OR IGNORE INTO articles
                           (pmc_id, title, journal_id, date_published,
                            created_at, updated_at)
                           VALUES (?, ?, ?, ?, ?, ?)""",
                        (f"archived:{key[0]}/{key[1]}",
                         f"{key[0]}/{key[1]}", journal_id,
                         f"{year}-01-01", now, now))
                    article_id = conn.execute(
                        "SELECT id FROM articles WHERE pmc_id = ?",
                        (f"archived:{key[0]}/{key[1]}",)).fetchone()["id"]
                    conn.execute(
                        """INSERT OR IGNORE INTO article_repositories
                           (article_id, repo_id) VALUES (?, ?)""",
                        (article_id, repo_id))
                for source, flag in (("requirements", "has_requirements"),
                                     ("setup", "has_setup"),
                                     ("pipfile", "has_pipfile")):
                    if row[flag] in ("1", "true", "True") and \
                            (repo_id, source) not in dep_done:
                        conn.execute(
                            """INSERT OR IGNORE INTO dependency_specs
                               (repo_id, source_file, name, raw)
                               VALUES (?, ?, 'archived', 'archived')""",
                            (repo_id, source))
                        dep_done.add((repo_id, source))

                title = row["relative_path"].rsplit("/", 1)[-1]
                title = title.removesuffix(".ipynb")
                conn.execute(
                    """INSERT INTO notebooks (repo_id, relative_path, valid,
                       language, language_version, title, total_cells,
                       code_cells, markdown_cells, raw_cells, empty_cells,
                       cells_with_output, created_at, updated_at)
                       VALUES (?, ?, 1, ?, ?, ?, ?, ?, ?, 0, ?, 0, ?, ?)
                       ON CONFLICT (repo_id, relative_path) DO NOTHING""",
                    (repo_id, row["relative_path"], row["language"],
                     row["language_version"], title,
                     int(row["total_cells"] or 0), int(row["code_cells"] or 0),
                     int(row["markdown_cells"] or 0),
                     int(row["empty_cells"] or 0), now, now))
                notebook_id = conn.execute(
                    "SELECT id FROM notebooks WHERE repo_id=? AND relative_path=?",
                    (repo_id, row["relative_path"])).fetchone()["id"]

                outcome = row["outcome_class"]
                conn.execute(
                    """INSERT INTO repro_outcomes (notebook_id, outcome_class,
                       reason, exception_name, diff_count, created_at,
                       updated_at)
                       VALUES (?, ?, NULL, ?, ?, ?, ?)
                       ON CONFLICT (notebook_id) DO UPDATE SET
                       outcome_class=excluded.outcome_class,
                       exception_name=excluded.exception_name,
                       diff_count=excluded.diff_count""",
                    (notebook_id, outcome, row["exception_name"] or None,
                     int(row["diff_count"] or 0), now, now))

                duration = float(row["total_duration_seconds"] or 0)
                if outcome in ("success_identical", "success_different",
                               "exception", "timeout",
                               "kernel_start_failure"):
                    exec_outcome = {
                        "success_identical": "completed",
                        "success_different": "completed",
                        "exception": "exception",
                        "timeout": "timeout",
                        "kernel_start_failure": "kernel_start_failure",
                    }[outcome]
                    conn.execute(
                        """INSERT INTO executions (notebook_id, env_id, outcome,
                           exception_name, total_duration_seconds, created_at,
                           updated_at)
                           VALUES (?, 'archived', ?, ?, ?, ?, ?)
                           ON CONFLICT (notebook_id) DO UPDATE SET
                           outcome=excluded.outcome""",
                        (notebook_id, exec_outcome,
                         row["exception_name"] or None, duration, now, now))
                now_rows += 1
    return now_rows
