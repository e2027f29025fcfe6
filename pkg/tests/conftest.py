"""Shared fixtures: JATS documents, a local literature/hosting HTTP service,
throwaway git repositories, and notebook JSON builders."""

from __future__ import annotations

import json
import re
import subprocess
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse
from xml.sax.saxutils import escape

import pytest

# ---------------------------------------------------------------------------
# JATS document builder


def jats_article(pmc_id: str, *, title: str = "A study", journal_title: str = "J Test",
                 issn: str | None = "1234-5678", nlm_abbrev: str | None = None,
                 publisher: str | None = None, subject: str | None = None,
                 doi: str | None = None, pubmed_id: str | None = None,
                 authors: list[dict] | None = None,
                 received: str | None = None, accepted: str | None = None,
                 published: str | None = None,
                 license_href: str | None = None,
                 keywords: list[str] | None = None,
                 mesh_terms: list[str] | None = None,
                 abstract: str = "",
                 body: str = "",
                 data_availability: str = "") -> str:
    """Render a minimal JATS article document as XML text.

    ``abstract``/``body``/``data_availability`` are inserted as already-escaped
    XML fragments; pass plain prose (URLs included) through ``xml_text``.
    """
    numeric = pmc_id.removeprefix("PMC")

    def date_el(tag_open: str, value: str | None, tag_close: str) -> str:
        if not value:
            return ""
        y, m, d = value.split("-")
        return (f"{tag_open}<day>{int(d)}</day><month>{int(m)}</month>"
                f"<year>{y}</year>{tag_close}")

    author_xml = ""
    if authors:
        contribs = []
        for a in authors:
            orcid = (f'<contrib-id contrib-id-type="orcid">{a["orcid"]}</contrib-id>'
                     if a.get("orcid") else "")
            email = f"<email>{a['email']}</email>" if a.get("email") else ""
            contribs.append(
                f'<contrib contrib-type="author">{orcid}'
                f"<name><surname>{escape(a['family'])}</surname>"
                f"<given-names>{escape(a['given'])}</given-names></name>"
                f"{email}</contrib>")
        author_xml = f"<contrib-group>{''.join(contribs)}</contrib-group>"

    history = ""
    if received or accepted:
        history = ("<history>"
                   + date_el('<date date-type="received">', received, "</date>")
                   + date_el('<date date-type="accepted">', accepted, "</date>")
                   + "</history>")

    kwd_xml = ""
    if keywords:
        kwd_xml += ("<kwd-group>"
                    + "".join(f"<kwd>{escape(k)}</kwd>" for k in keywords)
                    + "</kwd-group>")
    if mesh_terms:
        kwd_xml += ('<kwd-group kwd-group-type="MeSH">'
                    + "".join(f"<kwd>{escape(k)}</kwd>" for k in mesh_terms)
                    + "</kwd-group>")

    ids = f'<article-id pub-id-type="pmc">{numeric}</article-id>'
    if doi:
        ids += f'<article-id pub-id-type="doi">{doi}</article-id>'
    if pubmed_id:
        ids += f'<article-id pub-id-type="pmid">{pubmed_id}</article-id>'

    issn_xml = f"<issn>{issn}</issn>" if issn else ""
    nlm_xml = (f'<journal-id journal-id-type="nlm-ta">{nlm_abbrev}</journal-id>'
               if nlm_abbrev else "")
    pub_xml = f"<publisher><publisher-name>{publisher}</publisher-name></publisher>" \
        if publisher else ""
    subject_xml = (f"<article-categories><subj-group><subject>{subject}</subject>"
                   f"</subj-group></article-categories>") if subject else ""
    license_xml = (f'<permissions><license xmlns:xlink="http://www.w3.org/1999/xlink" '
                   f'xlink:href="{license_href}"/></permissions>') if license_href else ""
    abstract_xml = f"<abstract><p>{abstract}</p></abstract>" if abstract else ""
    da_xml = (f'<sec sec-type="data-availability"><p>{data_availability}</p></sec>'
              if data_availability else "")

    return f"""<?xml version="1.0" encoding="UTF-8"?>
<pmc-articleset>
<article article-type="research-article">
<front>
<journal-meta>{nlm_xml}<journal-title-group>
<journal-title>{escape(journal_title)}</journal-title></journal-title-group>
{issn_xml}{pub_xml}</journal-meta>
<article-meta>{ids}
<title-group><article-title>{escape(title)}</article-title></title-group>
{subject_xml}{author_xml}
{date_el('<pub-date pub-type="epub">', published, '</pub-date>')}
{history}{license_xml}{kwd_xml}{abstract_xml}
</article-meta>
</front>
<body><p>{body}</p>{da_xml}</body>
</article>
</pmc-articleset>"""


def xml_text(raw: str) -> str:
    """Escape prose for embedding into a jats_article fragment."""
    return escape(raw)


# ---------------------------------------------------------------------------
# fixture HTTP service: literature endpoints and hosting API on one port


class FixtureService:
    """Serves esearch/efetch plus a hosting-API stub from in-memory dicts.

    - ``articles``: pmc_id (with or without prefix) → JATS XML text
    - ``repo_meta``: "owner/name" → dict for /repos/{owner}/{name}
    - ``repo_languages`` / ``repo_releases`` / ``repo_commits``: same keying
    - ``hits``: every request path+query, in order (for cache assertions)
    """

    def __init__(self):
        self.articles: dict[str, str] = {}
        self.repo_meta: dict[str, dict] = {}
        self.repo_languages: dict[str, dict] = {}
        self.repo_releases: dict[str, list] = {}
        self.repo_commits: dict[str, list] = {}
        self.hits: list[str] = []
        self._lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _send(self, status: int, body: bytes, ctype: str):
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                parsed = urlparse(self.path)
                params = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                with service._lock:
                    service.hits.append(self.path)
                route = parsed.path
                if route.endswith("/esearch.fcgi"):
                    ids = service.matching_ids(params.get("term", ""))
                    retmax = int(params.get("retmax", "20"))
                    id_xml = "".join(f"<Id>{i}</Id>" for i in ids[:retmax])
                    body = (f"<eSearchResult><Count>{len(ids)}</Count>"
                            f"<IdList>{id_xml}</IdList></eSearchResult>")
                    self._send(200, body.encode(), "text/xml")
                elif route.endswith("/efetch.fcgi"):
                    wanted = params.get("id", "")
                    xml = service.article_for(wanted)
                    if xml is None:
                        self._send(404, b"no such article", "text/plain")
                    else:
                        self._send(200, xml.encode(), "text/xml")
                elif route.startswith("/repos/"):
                    self._repos(route, params)
                else:
                    self._send(404, b"unknown route", "text/plain")

            def _repos(self, route: str, params: dict):
                parts = route.split("/")  # ['', 'repos', owner, name, ...rest]
                if len(parts) < 4:
                    self._send(404, b"bad repo path", "text/plain")
                    return
                key = f"{parts[2]}/{parts[3]}"
                rest = parts[4:]
                if key not in service.repo_meta:
                    self._send(404, b"{}", "application/json")
                    return
                if not rest:
                    payload = service.repo_meta[key]
                elif rest == ["languages"]:
                    payload = service.repo_languages.get(key, {})
                elif rest == ["releases"]:
                    payload = service.repo_releases.get(key, [])
                elif rest == ["commits"]:
                    per_page = int(params.get("per_page", "100"))
                    page = int(params.get("page", "1"))
                    commits = service.repo_commits.get(key, [])
                    since = params.get("since")
                    if since:
                        commits = [c for c in commits
                                   if c["commit"]["committer"]["date"] >= since]
                    start = (page - 1) * per_page
                    payload = commits[start:start + per_page]
                else:
                    self._send(404, b"{}", "application/json")
                    return
                self._send(200, json.dumps(payload).encode(), "application/json")

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def matching_ids(self, term: str) -> list[str]:
        """Substring match: every AND-group needs one OR-alternative present."""
        groups = [g.strip().strip("()") for g in re.split(r"\bAND\b", term) if g.strip()]
        out = []
        for pmc_id, xml in sorted(self.articles.items()):
            text = xml.lower()
            ok = True
            for group in groups:
                alternatives = [a.strip().lower() for a in re.split(r"\bOR\b", group)]
                if not any(alt and alt in text for alt in alternatives):
                    ok = False
                    break
            if ok:
                out.append(pmc_id.removeprefix("PMC"))
        return out

    def article_for(self, requested: str) -> str | None:
        for pmc_id, xml in self.articles.items():
            if pmc_id.removeprefix("PMC") == requested.removeprefix("PMC"):
                return xml
        return None

    def hits_for(self, fragment: str) -> list[str]:
        with self._lock:
            return [h for h in self.hits if fragment in h]

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def service():
    svc = FixtureService()
    yield svc
    svc.close()


# ---------------------------------------------------------------------------
# git repositories


def make_git_repo(base: Path, owner: str, name: str, files: dict[str, str | bytes]) -> Path:
    """Create a committed git repository at base/owner/name with ``files``."""
    repo = base / owner / name
    repo.mkdir(parents=True)
    for rel, content in files.items():
        target = repo / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")
    env = {"GIT_AUTHOR_NAME": "t", "GIT_AUTHOR_EMAIL": "t@t",
           "GIT_COMMITTER_NAME": "t", "GIT_COMMITTER_EMAIL": "t@t",
           "HOME": str(base), "PATH": "/usr/bin:/bin:/usr/local/bin"}
    for cmd in (["git", "init", "-q", "-b", "main"],
                ["git", "add", "-A"],
                ["git", "-c", "commit.gpgsign=false", "commit", "-q", "-m", "init"]):
        subprocess.run(cmd, cwd=repo, check=True, env=env, capture_output=True)
    return repo


@pytest.fixture
def git_base(tmp_path):
    """Directory usable as git_base_url for local clones."""
    base = tmp_path / "gitbase"
    base.mkdir()
    return base


# ---------------------------------------------------------------------------
# notebook builders


def code_cell(source, outputs=None, execution_count=None, metadata=None):
    return {"cell_type": "code", "source": source, "outputs": outputs or [],
            "execution_count": execution_count, "metadata": metadata or {}}


def markdown_cell(source):
    return {"cell_type": "markdown", "source": source, "metadata": {}}


def raw_cell(source):
    return {"cell_type": "raw", "source": source, "metadata": {}}


def stream_output(text, name="stdout"):
    return {"output_type": "stream", "name": name, "text": text}


def execute_result(text_plain, execution_count=1):
    return {"output_type": "execute_result", "execution_count": execution_count,
            "data": {"text/plain": text_plain}, "metadata": {}}


def display_data(data):
    return {"output_type": "display_data", "data": data, "metadata": {}}


def error_output(ename, evalue, traceback=None):
    return {"output_type": "error", "ename": ename, "evalue": evalue,
            "traceback": traceback or [f"{ename}: {evalue}"]}


def nb4(cells, language="python", language_version="3.9.0", kernel_name="python3"):
    """Notebook JSON (v4) as text."""
    metadata = {}
    if kernel_name:
        metadata["kernelspec"] = {"name": kernel_name,
                                  "display_name": kernel_name,
                                  "language": language}
    if language:
        metadata["language_info"] = {"name": language, "version": language_version}
    return json.dumps({
        "nbformat": 4, "nbformat_minor": 2,
        "metadata": metadata,
        "cells": cells,
    })


def _v3_output(out: dict) -> dict:
    otype = out.get("output_type")
    if otype == "stream":
        return {"output_type": "stream", "stream": out.get("name", "stdout"),
                "text": out.get("text", "")}
    if otype == "execute_result":
        return {"output_type": "pyout",
                "prompt_number": out.get("execution_count", 1),
                "text": out.get("data", {}).get("text/plain", "")}
    if otype == "display_data":
        return {"output_type": "display_data",
                "text": out.get("data", {}).get("text/plain", "")}
    if otype == "error":
        return {"output_type": "pyerr", "ename": out.get("ename"),
                "evalue": out.get("evalue"),
                "traceback": out.get("traceback", [])}
    return out


def nb3(cells, language="python", language_version="2.7.6"):
    """Notebook JSON (v3, worksheets layout) as text."""
    converted = []
    for cell in cells:
        if cell["cell_type"] == "code":
            converted.append({
                "cell_type": "code", "input": cell["source"],
                "outputs": [_v3_output(o) for o in cell.get("outputs", [])],
                "prompt_number": cell.get("execution_count"),
                "language": language, "metadata": {},
            })
        else:
            converted.append(cell)
    return json.dumps({
        "nbformat": 3, "nbformat_minor": 0,
        "metadata": {"language_info": {"name": language,
                                       "version": language_version}},
        "worksheets": [{"cells": converted}],
    })


# ---------------------------------------------------------------------------
# config INI


def write_config(path: Path, sections: dict[str, dict]) -> Path:
    lines = []
    for section, keys in sections.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def pipeline_sections(workdir: Path, entrez_base: str, git_base: Path,
                      github_api_base: str = "none") -> dict[str, dict]:
    """INI sections pointing every endpoint and path at local fixtures.

    Retries are off and the rate limit is effectively unbounded so failure
    paths stay fast; worker counts are small so ordering stays predictable.
    """
    return {
        "endpoints": {"entrez_base": entrez_base,
                      "github_api_base": github_api_base,
                      "git_base_url": str(git_base)},
        "paths": {"workdir": str(workdir)},
        "limits": {"rate_limit_per_sec": 1000, "rate_burst": 100, "retries": 0,
                   "mine_workers": 2, "harvest_workers": 2,
                   "analyze_workers": 2, "install_workers": 1,
                   "execute_workers": 1},
        "execution": {"notebook_timeout_sec": 120},
    }
