"""Staged orchestration of a full audit run.

Each stage is individually re-runnable: entities already journaled as done
are skipped, a completed stage is skipped outright, and ordering between
stages is enforced (``StageOrderError``).  Worker pools parallelize the
I/O- and subprocess-bound stages; Ctrl-C drains gracefully, marking
in-flight entities pending so a resume picks them back up.

Every entity/stage transition is journaled twice: durably in the store's
``run_log`` (which drives resume) and as one JSON line in the progress log
(which makes long runs auditable as they happen).
"""

from __future__ import annotations

import json
import logging
import shutil
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import date, datetime, timezone
from pathlib import Path

from .config import RunConfig
from .diffing import NormalizationRules, classify, diff_notebooks
from .envs import (EnvironmentPlan, InstallResult, get_env_manager,
                   install_environment, load_default_stack, plan_environment,
                   read_dependency_sources)
from .errors import InvalidNotebookError, MissingToolError, StageOrderError
from .execution import CellResult, ExecutionPolicy, ExecutionRecord, execute_notebook
from .harvest import (GithubApi, RepositoryRecord, fetch_repo_metadata,
                      inventory, probe_and_clone)
from .mining import EntrezClient, RepoLink, SearchRequest, parse_article
from .notebooks import CellDescriptor, OutputItem, extract_imports, parse_notebook
from .ratelimit import TokenBucket
from .reporting import emit_report, estimate_footprint, funnel_report
from .store import STAGES, Store
from .stylecheck import check_style

log = logging.getLogger(__name__)

STAGE_ORDER: tuple[str, ...] = STAGES  # mine … report, in dependency order


class ProgressLog:
    """Append-only JSON-lines log of entity/stage transitions."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def emit(self, run_id: str, stage: str, entity: str, status: str,
             detail: str = "") -> None:
        line = json.dumps({
            "ts": datetime.now(timezone.utc).isoformat(),
            "run": run_id, "stage": stage, "entity": entity,
            "status": status, "detail": detail,
        }, ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class PipelineContext:
    """Everything a stage needs: config, open store, run id, progress log."""

    def __init__(self, config: RunConfig, store: Store, run_id: str,
                 progress: ProgressLog):
        self.config = config
        self.store = store
        self.run_id = run_id
        self.progress = progress

    @classmethod
    def open(cls, config: RunConfig, run_id: str) -> "PipelineContext":
        Path(config.workdir).mkdir(parents=True, exist_ok=True)
        store = Store(config.db_path)
        if not store.run_exists(run_id):
            store.begin_run(run_id)
        progress = ProgressLog(Path(config.workdir) / "progress.ndjson")
        return cls(config, store, run_id, progress)

    def close(self) -> None:
        self.store.close()

    # -- journaling ---------------------------------------------------------

    def mark(self, stage: str, entity: str, status: str, detail: str = "") -> None:
        self.store.log_stage(self.run_id, stage, entity, status, detail)
        self.progress.emit(self.run_id, stage, entity, status, detail)

    def done_entities(self, stage: str) -> set[str]:
        try:
            status = self.store.stage_status(self.run_id).get(stage, {})
        except KeyError:
            return set()
        return {entity for entity, state in status.items()
                if state == "done" and entity != "*"}

    def stage_done(self, stage: str) -> bool:
        return self.store.stage_done(self.run_id, stage)

    def require_stage(self, stage: str) -> None:
        if not self.stage_done(stage):
            raise StageOrderError(
                f"stage {stage!r} has not completed for run {self.run_id!r}; "
                f"run it first (order: {' -> '.join(STAGE_ORDER)})")


def _run_pool(ctx: PipelineContext, stage: str,
              tasks: list[tuple[str, object]], workers: int) -> int:
    """Run ``(entity, thunk)`` tasks on a pool; journal each outcome.

    Entity failures are recorded as data (status ``failed``) — they never
    abort the stage.  KeyboardInterrupt cancels what hasn't started, marks
    unfinished entities pending, and re-raises.  Returns the failure count.
    """
    failures = 0
    if not tasks:
        return 0
    settled: set[str] = set()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(thunk): entity for entity, thunk in tasks}
        try:
            for future in as_completed(futures):
                entity = futures[future]
                try:
                    future.result()
                except Exception as exc:
                    failures += 1
                    log.warning("%s failed for %s: %s", stage, entity, exc,
                                exc_info=True)
                    ctx.mark(stage, entity, "failed", f"{type(exc).__name__}: {exc}")
                else:
                    ctx.mark(stage, entity, "done")
                settled.add(entity)
        except KeyboardInterrupt:
            log.warning("interrupt: draining %s stage", stage)
            for future, entity in futures.items():
                future.cancel()
                if entity not in settled:
                    ctx.mark(stage, entity, "pending", "interrupted")
            pool.shutdown(cancel_futures=True)
            raise
    return failures


def _notebook_key(owner: str, name: str, relative_path: str) -> str:
    return f"{owner}/{name}:{relative_path}"


# ---------------------------------------------------------------------------
# stage: mine


def _entrez_client(cfg: RunConfig) -> EntrezClient:
    return EntrezClient(
        cfg.entrez_base, cfg.xml_cache_dir, api_key=cfg.entrez_api_key,
        rate_limiter=TokenBucket(cfg.rate_limit_per_sec, burst=cfg.rate_burst),
        retries=cfg.retries)


def stage_mine(ctx: PipelineContext) -> None:
    """Search the article service, fetch and parse full texts, store
    articles plus stub repository rows for every extracted link."""
    if ctx.stage_done("mine"):
        log.info("mine already complete for run %s; skipping", ctx.run_id)
        return
    cfg = ctx.config
    client = _entrez_client(cfg)
    ids = client.search(SearchRequest(query=cfg.query,
                                      max_results=cfg.max_results,
                                      date_cutoff=cfg.date_cutoff))
    log.info("mine: %d article ids", len(ids))
    done = ctx.done_entities("mine")

    def process(pmc_id: str):
        def thunk():
            xml_text = client.fetch_article_xml(pmc_id)
            article = parse_article(xml_text)
            article_id = ctx.store.store_article(article)
            for link in article.repo_links:
                repo_id = _repo_stub_id(ctx.store, link)
                ctx.store.link_article_repository(article_id, repo_id, link)
        return thunk

    tasks = [(pmc_id, process(pmc_id)) for pmc_id in ids if pmc_id not in done]
    _run_pool(ctx, "mine", tasks, cfg.mine_workers)
    ctx.mark("mine", "*", "done", f"{len(ids)} articles")


def _repo_stub_id(store: Store, link: RepoLink) -> int:
    """Row id for a linked repository, creating a pending stub if new.

    Never overwrites an existing row: harvest results must survive a
    re-mine.
    """
    row = store.query(
        "SELECT id FROM repositories WHERE owner = ? AND name = ?",
        (link.owner, link.name))
    if row:
        return row[0]["id"]
    return store.upsert_repository(RepositoryRecord(
        owner=link.owner, name=link.name, canonical_url=link.canonical_url,
        accessible=False, clone_status="pending"))


# ---------------------------------------------------------------------------
# stage: harvest


def stage_harvest(ctx: PipelineContext) -> None:
    """Clone every linked repository, enrich metadata, inventory notebooks."""
    if shutil.which("git") is None:
        raise MissingToolError("git not found on PATH; install git to clone")
    ctx.require_stage("mine")
    if ctx.stage_done("harvest"):
        log.info("harvest already complete for run %s; skipping", ctx.run_id)
        return
    cfg = ctx.config
    api = None
    if cfg.github_api_base and cfg.github_api_base != "none":
        api = GithubApi(cfg.github_api_base,
                        rate_limiter=TokenBucket(cfg.rate_limit_per_sec,
                                                 burst=cfg.rate_burst),
                        retries=cfg.retries)
    rows = ctx.store.query(
        """SELECT r.id, r.owner, r.name, r.canonical_url,
                  ar.raw_url, ar.source_location
           FROM repositories r
           LEFT JOIN article_repositories ar
                  ON ar.repo_id = r.id
                 AND ar.id = (SELECT MIN(id) FROM article_repositories
                              WHERE repo_id = r.id)
           ORDER BY r.owner, r.name""")
    done = ctx.done_entities("harvest")

    def process(row):
        def thunk():
            link = RepoLink(raw_url=row["raw_url"] or row["canonical_url"],
                            owner=row["owner"], name=row["name"],
                            canonical_url=row["canonical_url"],
                            source_location=row["source_location"] or "other")
            record = probe_and_clone(
                link, cfg.repos_dir, git_base_url=cfg.git_base_url,
                size_cap_bytes=cfg.clone_size_cap_mb * 1024 ** 2)
            if record.accessible and api is not None:
                record = fetch_repo_metadata(
                    record, api, _article_dates(ctx.store, row["id"]))
            repo_id = ctx.store.upsert_repository(record)
            if record.clone_status == "cloned":
                notebooks, _deps = inventory(record)
                for nb_file in notebooks:
                    ctx.store.upsert_notebook(repo_id, nb_file.relative_path,
                                              size_bytes=nb_file.size_bytes)
        return thunk

    tasks = [(f"{row['owner']}/{row['name']}", process(row))
             for row in rows if f"{row['owner']}/{row['name']}" not in done]
    _run_pool(ctx, "harvest", tasks, cfg.harvest_workers)
    ctx.mark("harvest", "*", "done", f"{len(rows)} repositories")


def _article_dates(store: Store, repo_id: int) -> dict[str, date | None]:
    """Publication dates of the first article linked to a repository."""
    rows = store.query(
        """SELECT a.date_published, a.date_accepted, a.date_received
           FROM articles a JOIN article_repositories ar ON ar.article_id = a.id
           WHERE ar.repo_id = ? ORDER BY ar.id LIMIT 1""", (repo_id,))

    def parse(value) -> date | None:
        if not value:
            return None
        try:
            return date.fromisoformat(str(value)[:10])
        except ValueError:
            return None

    if not rows:
        return {}
    return {"published": parse(rows[0]["date_published"]),
            "accepted": parse(rows[0]["date_accepted"]),
            "received": parse(rows[0]["date_received"])}


# ---------------------------------------------------------------------------
# stage: analyze


def stage_analyze(ctx: PipelineContext) -> None:
    """Parse every inventoried notebook: structure, imports, style,
    and the repository's declared dependencies."""
    ctx.require_stage("harvest")
    if ctx.stage_done("analyze"):
        log.info("analyze already complete for run %s; skipping", ctx.run_id)
        return
    cfg = ctx.config
    repos = ctx.store.query(
        """SELECT id, owner, name, local_path FROM repositories
           WHERE clone_status = 'cloned' AND local_path IS NOT NULL
           ORDER BY owner, name""")
    done = ctx.done_entities("analyze")

    def process(repo):
        def thunk():
            _analyze_repo(ctx, repo["id"], repo["owner"], repo["name"],
                          repo["local_path"])
        return thunk

    tasks = [(f"{repo['owner']}/{repo['name']}", process(repo))
             for repo in repos if f"{repo['owner']}/{repo['name']}" not in done]
    _run_pool(ctx, "analyze", tasks, cfg.analyze_workers)
    ctx.mark("analyze", "*", "done", f"{len(repos)} repositories")


def _repo_record_for_inventory(owner: str, name: str,
                               local_path: str) -> RepositoryRecord:
    return RepositoryRecord(owner=owner, name=name,
                            canonical_url=f"https://github.com/{owner}/{name}",
                            accessible=True, clone_status="cloned",
                            local_path=local_path)


def _analyze_repo(ctx: PipelineContext, repo_id: int, owner: str, name: str,
                  local_path: str) -> None:
    record = _repo_record_for_inventory(owner, name, local_path)
    notebooks, dep_files = inventory(record)

    parsed_sources, _notes = read_dependency_sources(dep_files, local_path)
    specs = [spec for value in parsed_sources.values() if value
             for spec in value]
    ctx.store.replace_dependency_specs(repo_id, specs)

    root = Path(local_path)
    for nb_file in notebooks:
        nb_path = root / nb_file.relative_path
        try:
            raw = nb_path.read_bytes()
        except OSError as exc:
            ctx.store.upsert_notebook(repo_id, nb_file.relative_path,
                                      size_bytes=nb_file.size_bytes,
                                      invalid_reason=f"unreadable: {exc}")
            continue
        try:
            descriptor, cells = parse_notebook(raw, nb_file.relative_path)
        except InvalidNotebookError as exc:
            ctx.store.upsert_notebook(repo_id, nb_file.relative_path,
                                      size_bytes=nb_file.size_bytes,
                                      invalid_reason=str(exc))
            continue
        style = check_style(cells)
        notebook_id = ctx.store.upsert_notebook(
            repo_id, nb_file.relative_path, size_bytes=nb_file.size_bytes,
            descriptor=descriptor,
            style_skipped_cells=style.parse_skipped_cells)
        ctx.store.replace_cells(notebook_id, cells)
        records, _skipped = extract_imports(cells, local_path)
        ctx.store.replace_imports(notebook_id, records)
        ctx.store.replace_style_findings(notebook_id, style)


# ---------------------------------------------------------------------------
# stage: build-envs


def stage_build_envs(ctx: PipelineContext) -> None:
    """Plan an environment per Python notebook, then build each distinct
    environment once."""
    cfg = ctx.config
    manager = get_env_manager(cfg.env_manager, conda_tool=cfg.conda_tool)
    ctx.require_stage("analyze")
    if ctx.stage_done("build-envs"):
        log.info("build-envs already complete for run %s; skipping", ctx.run_id)
        return
    default_stack = load_default_stack(cfg.default_stack or None)

    rows = ctx.store.query(
        """SELECT n.id AS notebook_id, n.relative_path, n.language_version,
                  n.title, r.id AS repo_id, r.owner, r.name, r.local_path
           FROM notebooks n JOIN repositories r ON n.repo_id = r.id
           WHERE n.valid = 1 AND n.language = 'python'
                 AND r.local_path IS NOT NULL
           ORDER BY r.owner, r.name, n.relative_path""")

    # planning is cheap and deterministic: always recompute, store the result
    sources_cache: dict[int, tuple[dict, list[str]]] = {}
    plans: dict[str, EnvironmentPlan] = {}
    for row in rows:
        if row["repo_id"] not in sources_cache:
            record = _repo_record_for_inventory(row["owner"], row["name"],
                                                row["local_path"])
            _nbs, dep_files = inventory(record)
            sources_cache[row["repo_id"]] = read_dependency_sources(
                dep_files, row["local_path"])
        parsed_sources, notes = sources_cache[row["repo_id"]]
        descriptor_key = _notebook_key(row["owner"], row["name"],
                                       row["relative_path"])
        plan = plan_environment(
            _plan_stub(descriptor_key, row["language_version"]),
            parsed_sources, default_python=cfg.default_python,
            default_stack=default_stack, extra_notes=notes)
        ctx.store.upsert_environment_plan(row["notebook_id"], plan)
        plans.setdefault(plan.env_id, plan)

    done = ctx.done_entities("build-envs")

    def process(plan: EnvironmentPlan):
        def thunk():
            result = install_environment(plan, manager, cfg.envs_dir,
                                         timeout_seconds=cfg.install_timeout_sec)
            ctx.store.upsert_install_result(result)
        return thunk

    tasks = [(f"env:{env_id}", process(plan))
             for env_id, plan in sorted(plans.items())
             if f"env:{env_id}" not in done]
    _run_pool(ctx, "build-envs", tasks, cfg.install_workers)
    ctx.mark("build-envs", "*", "done",
             f"{len(rows)} notebooks, {len(plans)} distinct environments")


def _plan_stub(reference: str, language_version: str | None):
    """Minimal object carrying what plan_environment reads from a notebook."""
    from .notebooks import NotebookDescriptor
    return NotebookDescriptor(relative_path=reference, title="",
                              nbformat_major=4, language="python",
                              language_version=language_version)


# ---------------------------------------------------------------------------
# stage: execute


def resolve_shim(cfg: RunConfig) -> str:
    """Path of the kernel-shim script executed inside each environment.

    Uses the configured path when given; otherwise looks for an installed
    ``nbshim`` package and runs its shim module by file path (the script is
    dependency-free, so any environment's interpreter can run it).
    """
    if cfg.shim_path:
        path = Path(cfg.shim_path)
        if not path.exists():
            raise MissingToolError(f"shim not found at {path}")
        return str(path)
    try:
        import importlib.util
        found = importlib.util.find_spec("nbshim.shim")
    except (ImportError, ModuleNotFoundError, ValueError):
        found = None
    if found is not None and found.origin:
        return found.origin
    raise MissingToolError(
        "no notebook shim available: set execution.shim_path or install the "
        "nbshim package")


def stage_execute(ctx: PipelineContext) -> None:
    """Re-execute each runnable notebook in its built environment.

    Every execution happens in a fresh copy of the repository so notebook
    side effects (written files, mutated data) never leak between runs.
    """
    cfg = ctx.config
    shim = resolve_shim(cfg)
    manager = get_env_manager(cfg.env_manager, conda_tool=cfg.conda_tool)
    ctx.require_stage("build-envs")
    if ctx.stage_done("execute"):
        log.info("execute already complete for run %s; skipping", ctx.run_id)
        return
    policy = ExecutionPolicy(
        per_notebook_timeout_seconds=cfg.notebook_timeout_sec,
        stop_on_exception=cfg.stop_on_exception,
        kill_grace_seconds=cfg.kill_grace_sec)
    scratch_root = Path(cfg.workdir) / "exec-scratch"
    scratch_root.mkdir(parents=True, exist_ok=True)

    rows = ctx.store.query(
        """SELECT n.id AS notebook_id, n.relative_path,
                  p.env_id, r.owner, r.name, r.local_path
           FROM notebooks n
           JOIN repositories r ON n.repo_id = r.id
           JOIN environment_plans p ON p.notebook_id = n.id
           JOIN install_results i ON i.env_id = p.env_id
           WHERE i.success = 1 AND r.local_path IS NOT NULL
           ORDER BY r.owner, r.name, n.relative_path""")
    done = ctx.done_entities("execute")

    def process(row):
        def thunk():
            _execute_one(ctx, row, policy, manager, shim, scratch_root)
        return thunk

    tasks = []
    for row in rows:
        key = _notebook_key(row["owner"], row["name"], row["relative_path"])
        if key not in done:
            tasks.append((key, process(row)))
    _run_pool(ctx, "execute", tasks, cfg.execute_workers)
    ctx.mark("execute", "*", "done", f"{len(rows)} notebooks")


def _execute_one(ctx: PipelineContext, row, policy: ExecutionPolicy,
                 manager, shim: str, scratch_root: Path) -> None:
    cfg = ctx.config
    key = _notebook_key(row["owner"], row["name"], row["relative_path"])
    n_code_cells = sum(
        1 for cell in ctx.store.query(
            "SELECT source FROM cells WHERE notebook_id = ? AND kind = 'code'",
            (row["notebook_id"],))
        if cell["source"].strip())
    env_python = manager.python_path(Path(cfg.envs_dir) / row["env_id"])

    workdir = scratch_root / uuid.uuid4().hex
    try:
        shutil.copytree(row["local_path"], workdir, symlinks=True,
                        ignore=shutil.ignore_patterns(".git"))
        record = execute_notebook(
            workdir / row["relative_path"], notebook_ref=key,
            env_id=row["env_id"], n_code_cells=n_code_cells, policy=policy,
            python_executable=str(env_python), shim_path=shim)
        ctx.store.upsert_execution(row["notebook_id"], record)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


# ---------------------------------------------------------------------------
# stage: diff


def stage_diff(ctx: PipelineContext) -> None:
    """Diff rerun outputs against stored outputs and classify every
    notebook into its single reproducibility outcome."""
    ctx.require_stage("execute")
    if ctx.stage_done("diff"):
        log.info("diff already complete for run %s; skipping", ctx.run_id)
        return
    rows = ctx.store.query(
        """SELECT n.id AS notebook_id, n.relative_path, n.valid,
                  n.invalid_reason, n.language, r.owner, r.name, r.accessible
           FROM notebooks n JOIN repositories r ON n.repo_id = r.id
           ORDER BY r.owner, r.name, n.relative_path""")
    done = ctx.done_entities("diff")
    rules = NormalizationRules()

    def process(row):
        def thunk():
            _diff_and_classify(ctx, row, rules)
        return thunk

    tasks = []
    for row in rows:
        key = _notebook_key(row["owner"], row["name"], row["relative_path"])
        if key not in done:
            tasks.append((key, process(row)))
    _run_pool(ctx, "diff", tasks, ctx.config.analyze_workers)
    ctx.mark("diff", "*", "done", f"{len(rows)} notebooks")


def _load_original_cells(store: Store, notebook_id: int) -> list[CellDescriptor]:
    cells = []
    for row in store.query(
            """SELECT cell_index, kind, source, outputs, execution_count
               FROM cells WHERE notebook_id = ? ORDER BY cell_index""",
            (notebook_id,)):
        cells.append(CellDescriptor(
            index=row["cell_index"], kind=row["kind"], source=row["source"],
            outputs=[OutputItem.from_json(o) for o in json.loads(row["outputs"])],
            execution_count=row["execution_count"]))
    return cells


def _load_execution(store: Store, notebook_id: int,
                    key: str) -> ExecutionRecord | None:
    rows = store.query(
        """SELECT id, env_id, outcome, exception_name, exception_message,
                  exception_cell_index, total_duration_seconds, started_at
           FROM executions WHERE notebook_id = ?""", (notebook_id,))
    if not rows:
        return None
    row = rows[0]
    cell_results = [
        CellResult(cell_index=r["cell_index"],
                   outputs=[OutputItem.from_json(o)
                            for o in json.loads(r["outputs"])],
                   duration_seconds=r["duration_seconds"])
        for r in store.query(
            """SELECT cell_index, outputs, duration_seconds FROM cell_results
               WHERE execution_id = ? ORDER BY cell_index""", (row["id"],))]
    return ExecutionRecord(
        notebook=key, env_id=row["env_id"], outcome=row["outcome"],
        cell_results=cell_results,
        exception_name=(row["exception_name"] or "Exception"
                        if row["outcome"] == "exception"
                        else row["exception_name"]),
        exception_message=row["exception_message"],
        exception_cell_index=row["exception_cell_index"],
        total_duration_seconds=row["total_duration_seconds"],
        started_at=row["started_at"] or "")


def _load_install(store: Store, notebook_id: int,
                  key: str) -> InstallResult | None:
    rows = store.query(
        """SELECT p.env_id, p.python_version, p.fallback_default_stack,
                  i.success, i.reason, i.log
           FROM environment_plans p
           LEFT JOIN install_results i ON i.env_id = p.env_id
           WHERE p.notebook_id = ?""", (notebook_id,))
    if not rows or rows[0]["success"] is None:
        return None
    row = rows[0]
    plan = EnvironmentPlan(
        notebook=key, python_version=row["python_version"],
        fallback_default_stack=bool(row["fallback_default_stack"]),
        env_id=row["env_id"])
    return InstallResult(plan=plan, success=bool(row["success"]),
                         log=row["log"] or "(log not retained)",
                         duration_seconds=0.0, reason=row["reason"])


def _diff_and_classify(ctx: PipelineContext, row, rules: NormalizationRules) -> None:
    store = ctx.store
    key = _notebook_key(row["owner"], row["name"], row["relative_path"])
    notebook_id = row["notebook_id"]

    install = _load_install(store, notebook_id, key)
    record = _load_execution(store, notebook_id, key)

    not_attempted_reason = None
    if install is None and record is None:
        if not row["accessible"]:
            not_attempted_reason = "repository inaccessible"
        elif not row["valid"]:
            not_attempted_reason = f"invalid notebook: {row['invalid_reason']}"
        elif row["language"] != "python":
            not_attempted_reason = f"language {row['language'] or 'unknown'}"
        else:
            not_attempted_reason = "no environment planned"

    diffs = None
    if record is not None and record.outcome == "completed":
        original = _load_original_cells(store, notebook_id)
        diffs = diff_notebooks(original, record.cell_results, rules)
        store.replace_diffs(notebook_id, diffs)

    outcome = classify(install, record, diffs, notebook=key,
                       not_attempted_reason=not_attempted_reason)
    store.upsert_repro_outcome(notebook_id, outcome)


# ---------------------------------------------------------------------------
# stage: report


def stage_report(ctx: PipelineContext, fmt: str = "json") -> None:
    """Emit every report extract plus the run's resource-footprint estimate.

    Always re-runs (read-only and deterministic over the store).
    """
    ctx.require_stage("diff")
    cfg = ctx.config
    runtime_hours = _run_runtime_hours(ctx)
    footprint = estimate_footprint(
        runtime_hours=runtime_hours, n_cores=cfg.n_cores,
        power_per_core_watts=cfg.power_per_core_watts,
        core_usage_fraction=cfg.core_usage_fraction, memory_gb=cfg.memory_gb,
        power_per_gb_watts=cfg.power_per_gb_watts, pue=cfg.pue,
        carbon_intensity_kg_per_kwh=cfg.carbon_intensity_kg_per_kwh)
    paths = emit_report(ctx.store, fmt, cfg.reports_dir, footprint=footprint)
    funnel = funnel_report(ctx.store)
    ctx.mark("report", "*", "done",
             f"{len(paths)} files; {funnel.notebooks_total} notebooks")


def _run_runtime_hours(ctx: PipelineContext) -> float:
    started = ctx.store.scalar(
        """SELECT MIN(created_at) FROM run_log
           WHERE run_id = ? AND stage = 'run'""", (ctx.run_id,))
    if not started:
        return 0.0
    try:
        begun = datetime.fromisoformat(started)
    except ValueError:
        return 0.0
    elapsed = datetime.now(timezone.utc) - begun
    return max(elapsed.total_seconds(), 0.0) / 3600.0


# ---------------------------------------------------------------------------
# run-all

STAGE_FUNCTIONS = {
    "mine": stage_mine,
    "harvest": stage_harvest,
    "analyze": stage_analyze,
    "build-envs": stage_build_envs,
    "execute": stage_execute,
    "diff": stage_diff,
    "report": stage_report,
}


def run_all(ctx: PipelineContext, fmt: str = "json") -> None:
    """The whole pipeline in order; equivalent to running each stage."""
    for stage in STAGE_ORDER:
        if stage == "report":
            stage_report(ctx, fmt)
        else:
            STAGE_FUNCTIONS[stage](ctx)
